import math

import numpy as np
import pytest
import torch
from conftest import tiny_model_config
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from dccomix.backbone import Synthesizer
from dccomix.data import Waveform, read_labels, read_manifest, read_wav, write_manifest
from dccomix.data.corpus import resolve_audio
from dccomix.errors import ConfigurationError, EnvironmentUnavailableError, InvalidInputError
from dccomix.evaluation import (
    EvalReport,
    MelStatsEmbedder,
    PairRecord,
    batch_evaluate,
    code_similarity,
    code_vector,
    cosine,
    leakage_probe,
    linear_probe,
    pair_references,
    sign_test,
    speaker_similarity,
)

vectors = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=16)


# -- cosine ---------------------------------------------------------------------


def test_cosine_examples():
    assert cosine([1, 2, 3], [1, 2, 3]) == 1.0
    assert cosine([1, 0], [0, 1]) == 0.0
    assert cosine([1, 0], [1, 1]) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert f"{cosine([1, 0], [1, 1]):.7f}" == "0.7071068"


def test_cosine_errors():
    with pytest.raises(InvalidInputError):
        cosine([0, 0], [1, 1])
    with pytest.raises(InvalidInputError):
        cosine([1, 2], [1, 2, 3])


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_cosine_properties(data):
    a = np.array(data.draw(vectors))
    b = np.array(data.draw(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=len(a), max_size=len(a))))
    lam = data.draw(st.floats(1e-3, 1e3))
    assume(np.abs(a).max() > 1e-6 and np.abs(b).max() > 1e-6)
    c = cosine(a, b)
    assert -1.0 <= c <= 1.0
    assert c == cosine(b, a)
    assert cosine(lam * a, b) == pytest.approx(c, abs=1e-12)
    assert cosine(a, a) == 1.0


# -- similarities -----------------------------------------------------------------


def test_code_similarity_self(fast_codec, tiny_waveforms):
    for w in tiny_waveforms[:5]:
        assert code_similarity(w, w, fast_codec) == 1.0
        assert code_similarity(w, w, fast_codec, mode="histogram") == 1.0


def test_noise_vs_tone_ordering(fast_codec):
    rng = np.random.default_rng(0)
    t = np.arange(24000) / 24000
    tone = Waveform(0.5 * np.sin(2 * np.pi * 220 * t))
    tone2 = Waveform(0.5 * np.sin(2 * np.pi * 220 * t + 1.0))
    noise = Waveform(np.clip(0.3 * rng.standard_normal(24000), -1, 1))
    assert code_similarity(noise, tone, fast_codec) < code_similarity(tone, tone2, fast_codec)


def test_code_vector_lengths(fast_codec, tiny_waveforms):
    assert code_vector(tiny_waveforms[0], fast_codec).shape == (32,)
    assert code_vector(tiny_waveforms[0], fast_codec, "histogram").shape == (8 * 64,)
    with pytest.raises(ConfigurationError):
        code_vector(tiny_waveforms[0], fast_codec, "flatten")
    with pytest.raises(InvalidInputError):
        code_vector(Waveform(np.zeros(10)), fast_codec)


def test_speaker_similarity_identical(tiny_waveforms):
    assert speaker_similarity(tiny_waveforms[0], tiny_waveforms[0]) == 1.0


def test_speaker_similarity_orders_speakers(tiny_corpus):
    manifest = tiny_corpus / "manifest.tsv"
    recs = {r.utt_id: r for r in read_manifest(manifest)}
    labels = read_labels(tiny_corpus / "labels.tsv")
    emb = MelStatsEmbedder()
    vec = {l.utt_id: emb(read_wav(resolve_audio(manifest, recs[l.utt_id]))) for l in labels}
    spk = {l.utt_id: l.speaker_class for l in labels}
    same, cross = [], []
    ids = sorted(vec)
    for i, a in enumerate(ids):
        for b in ids[i + 1:]:
            (same if spk[a] == spk[b] else cross).append(cosine(vec[a], vec[b]))
    assert np.mean(same) > np.mean(cross)


def test_embedder_failure_is_environment_error(tiny_waveforms):
    def broken(w):
        raise RuntimeError("model missing")

    with pytest.raises(EnvironmentUnavailableError):
        speaker_similarity(tiny_waveforms[0], tiny_waveforms[1], broken)
    with pytest.raises(EnvironmentUnavailableError):
        MelStatsEmbedder()(Waveform(np.zeros(1600), 16000))


# -- reports ----------------------------------------------------------------------


def test_report_round_trip(tmp_path):
    rep = EvalReport([PairRecord("a", "b", 0.5, 0.25), PairRecord("c", "d", 1 / 3, -0.125)], seed=7,
                     prosody_probe_acc=0.9, content_probe_acc=None, param_counts={"full": 123})
    text = rep.to_text()
    back = EvalReport.from_text(text)
    assert back == rep and back.to_text() == text
    assert "mean_cos_s: 0.41666666666666663" in text
    rep.write(tmp_path / "r.txt")
    assert (tmp_path / "r.txt").read_text() == text
    with pytest.raises(InvalidInputError):
        EvalReport.from_text("garbage\n")


def test_pairing_deterministic_and_content_differs(tiny_corpus):
    recs = [r for r in read_manifest(tiny_corpus / "manifest.tsv") if r.split == "train"]
    a, b = pair_references(recs, 3), pair_references(recs, 3)
    assert [(u.utt_id, r.utt_id) for u, r in a] == [(u.utt_id, r.utt_id) for u, r in b]
    assert all(u.text != r.text and u.split == r.split for u, r in a)
    assert len(a) == len(recs)


def test_single_utterance_manifest(tiny_corpus, tmp_path):
    rec = read_manifest(tiny_corpus / "manifest.tsv")[0]
    rec = type(rec)(rec.utt_id, rec.speaker_id, str((tiny_corpus / rec.audio_path).resolve()), rec.text,
                    rec.duration_s, "test")
    write_manifest(tmp_path / "one.tsv", [rec])
    model = Synthesizer(tiny_model_config())
    with pytest.raises(ConfigurationError):
        batch_evaluate(tmp_path / "one.tsv", model, None)


def test_batch_evaluate(tiny_corpus, fast_codec):
    torch.manual_seed(0)
    model = Synthesizer(tiny_model_config()).eval()
    manifest = tiny_corpus / "manifest.tsv"
    n_test = sum(r.split == "test" for r in read_manifest(manifest))
    r1 = batch_evaluate(manifest, model, fast_codec, seed=5)
    r2 = batch_evaluate(manifest, model, fast_codec, seed=5)
    assert r1.n_pairs == n_test == 8
    assert r1.to_text() == r2.to_text()
    assert abs(r1.mean_cos_s - np.mean([p.cos_s for p in r1.pairs])) <= 1e-12
    assert abs(r1.mean_cos_d - np.mean([p.cos_d for p in r1.pairs])) <= 1e-12
    assert all(-1 <= p.cos_s <= 1 and -1 <= p.cos_d <= 1 for p in r1.pairs)


# -- probes -----------------------------------------------------------------------


def test_probe_on_one_hot_labels():
    rng = np.random.default_rng(0)
    pros = np.repeat(np.arange(4), 250)
    content = rng.permutation(np.repeat(np.arange(4), 250))
    emb = np.eye(4)[pros]
    out = leakage_probe(emb, pros, content, seed=0)
    assert out["prosody_probe_acc"] == 1.0
    assert abs(out["content_probe_acc"] - 0.25) <= 0.15


def test_probe_deterministic_and_bounded():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((100, 6))
    y = rng.integers(0, 3, 100)
    a, b = linear_probe(x, y, seed=4), linear_probe(x, y, seed=4)
    assert a == b and 0.0 <= a <= 1.0


def test_probe_needs_two_classes():
    with pytest.raises(ConfigurationError):
        leakage_probe(np.zeros((10, 2)), [0] * 10, [0, 1] * 5)


def test_sign_test():
    wins, n, p = sign_test(np.array([2.0, 3.0, 4.0, 1.0]), np.array([1.0, 1.0, 1.0, 1.0]))
    assert (wins, n) == (3, 3) and p == pytest.approx(0.125)
