import math

import numpy as np
import numpy.testing as npt
import pytest

from dualcan import autodiff as ad
from dualcan import data, layers, model

from conftest import tiny_documents, tiny_embeddings, tiny_vocab
from oracles import model_forward_loops

LN2 = math.log(2.0)


def zero_all(params):
    for t in params.named().values():
        t.data[:] = 0.0
    return params


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------


def test_encode_news_single_word_sentence(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    doc = data.Document("x", [["alpha"]], [], [], 0)
    sample = data.encode_document(doc, vocab, hp)
    s, mask = model.encode_news(sample.news_ids, sample.news_word_mask,
                                sample.news_sent_mask, params, emb, hp)
    npt.assert_array_equal(mask, [True, False])
    # expected: word BiGRU state pooled with weight 1, then the sentence BiGRU
    word_vec = emb.matrix[vocab.id_of("alpha")].reshape(-1, 1)
    word_states = layers.bigru(ad.Tensor(word_vec), params.news_encoder.fwd,
                               params.news_encoder.bwd)
    pooled, weights = layers.word_attention(word_states, np.array([True]),
                                            params.news_encoder.attention)
    npt.assert_array_equal(weights.data, [[1.0]])
    seq = np.hstack([pooled.data, np.zeros((4, 1))])
    expected = layers.bigru(ad.Tensor(seq), params.sentence_fwd,
                            params.sentence_bwd, mask).data
    expected[:, 1] = 0.0
    npt.assert_allclose(s.data, expected, atol=1e-12)


def test_encode_news_zero_params_zero_embeddings(tiny_setup):
    hp, params, vocab, _, _ = tiny_setup
    zero_all(params)
    emb = data.EmbeddingTable(np.zeros((len(vocab), hp.embedding_dim)), hp.embedding_dim)
    doc = data.Document("x", [["alpha", "beta"], ["gamma"]], [], [], 0)
    sample = data.encode_document(doc, vocab, hp)
    s, _ = model.encode_news(sample.news_ids, sample.news_word_mask,
                             sample.news_sent_mask, params, emb, hp)
    npt.assert_array_equal(s.data, np.zeros_like(s.data))


def test_encode_news_empty_document_errors(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    ids = np.zeros((2, 3), dtype=int)
    masks = np.zeros((2, 3), dtype=bool)
    with pytest.raises(ad.DegenerateMaskError):
        model.encode_news(ids, masks, np.zeros(2, dtype=bool), params, emb, hp)


def test_encode_side_empty_gives_zeros_and_false_mask(tiny_setup):
    hp, params, _, emb, _ = tiny_setup
    ids = np.zeros((2, 3), dtype=int)
    masks = np.zeros((2, 3), dtype=bool)
    cols, mask = model.encode_side(ids, masks, np.zeros(2, dtype=bool),
                                   params.comment_encoder, emb, hp)
    npt.assert_array_equal(cols.data, np.zeros((4, 2)))
    assert not mask.any()


def test_encode_side_exact_limit_full_mask(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    doc = data.Document("x", [["alpha"]],
                        [["beta", "gamma"], ["delta"]], [], 0)
    sample = data.encode_document(doc, vocab, hp)
    cols, mask = model.encode_side(sample.comment_ids, sample.comment_word_mask,
                                   sample.comment_sent_mask,
                                   params.comment_encoder, emb, hp)
    assert mask.all()
    assert (np.abs(cols.data).sum(axis=0) > 0).all()


def test_encode_side_truncation_is_inert(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    base = [["alpha", "beta"], ["gamma"], ["delta"], ["eps"], ["zeta"]]
    doc_a = data.Document("a", [["alpha"]], base, [], 0)
    doc_b = data.Document("b", [["alpha"]], base[:2] + [["kappa"], ["eta"], ["theta"]], [], 0)
    sample_a = data.encode_document(doc_a, vocab, hp)
    sample_b = data.encode_document(doc_b, vocab, hp)
    # limits cut both comment lists to the first two sentences
    npt.assert_array_equal(sample_a.comment_ids, sample_b.comment_ids)
    cols_a, _ = model.encode_side(sample_a.comment_ids, sample_a.comment_word_mask,
                                  sample_a.comment_sent_mask, params.comment_encoder, emb, hp)
    cols_b, _ = model.encode_side(sample_b.comment_ids, sample_b.comment_word_mask,
                                  sample_b.comment_sent_mask, params.comment_encoder, emb, hp)
    npt.assert_array_equal(cols_a.data, cols_b.data)


def test_encode_news_matches_composed_oracle(tiny_setup):
    hp, params, vocab, emb, samples = tiny_setup
    from oracles import bigru_loops, word_side_loops

    sample = samples[0]
    s, _ = model.encode_news(sample.news_ids, sample.news_word_mask,
                             sample.news_sent_mask, params, emb, hp)
    s0 = word_side_loops(sample.news_ids, sample.news_word_mask,
                         sample.news_sent_mask, params.news_encoder, emb)
    expected = bigru_loops(s0, params.sentence_fwd, params.sentence_bwd,
                           list(sample.news_sent_mask))
    expected *= sample.news_sent_mask.astype(float).reshape(1, -1)
    npt.assert_allclose(s.data, expected, atol=1e-10)


def test_encode_samples_matches_encode_sample(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    batch = model.encode_samples(samples, params, emb, hp)
    for sample, enc_b in zip(samples, batch):
        enc_1 = model.encode_sample(sample, params, emb, hp)
        npt.assert_allclose(enc_1.news.data, enc_b.news.data, atol=1e-12)
        npt.assert_allclose(enc_1.entities.data, enc_b.entities.data, atol=1e-12)
        npt.assert_allclose(enc_1.comments.data, enc_b.comments.data, atol=1e-12)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def test_forward_zero_head_gives_uniform_probabilities(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    params.head_w2.data[:] = 0.0
    params.head_b2.data[:] = 0.0
    logits, _ = model.run_sample(samples[0], params, emb, hp)
    npt.assert_array_equal(logits.data, np.zeros((2, 1)))
    npt.assert_allclose(model.predict_probs(logits), [0.5, 0.5], atol=1e-15)


def test_forward_entity_order_permutation_invariant(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    doc = tiny_documents()[0]
    sents = doc.entity_descriptions[0][1]
    permuted = data.Document(doc.doc_id, doc.news_sentences, doc.comment_sentences,
                             [("acme", [sents[1], sents[0]])], doc.label)
    logits_a, _ = model.run_sample(data.encode_document(doc, vocab, hp), params, emb, hp)
    logits_b, _ = model.run_sample(data.encode_document(permuted, vocab, hp), params, emb, hp)
    npt.assert_allclose(logits_a.data, logits_b.data, atol=1e-12)


def test_forward_matches_composed_oracle(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    for sample in samples:
        logits, _ = model.run_sample(sample, params, emb, hp)
        exp_logits, exp_probs = model_forward_loops(sample, params, emb, hp)
        npt.assert_allclose(logits.data.reshape(-1), exp_logits, atol=1e-10)
        npt.assert_allclose(model.predict_probs(logits), exp_probs, atol=1e-10)


def test_forward_attention_report_sums(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    _, report = model.run_sample(samples[0], params, emb, hp)
    for weights, mask in ((report.news_entity, report.news_mask),
                          (report.entity, report.entity_mask),
                          (report.news_comment, report.news_mask),
                          (report.comment, report.comment_mask)):
        assert abs(weights[mask].sum() - 1.0) <= 1e-10
        assert (weights[~mask] == 0.0).all()


def test_forward_empty_side_uses_uniform_fallback(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    doc = data.Document("x", [["alpha", "beta"]], [], [], 1)
    sample = data.encode_document(doc, vocab, hp)
    logits, report = model.run_sample(sample, params, emb, hp)
    assert np.isfinite(logits.data).all()
    # no real comments: uniform over every slot, pooled vector is zero
    npt.assert_allclose(report.comment, [0.5, 0.5], atol=1e-12)
    enc = model.encode_sample(sample, params, emb, hp)
    out = layers.co_attention(enc.news, enc.comments, enc.news_mask,
                              np.ones(2, dtype=bool), params.comment_coattn)
    npt.assert_allclose(out.pooled_secondary.data, np.zeros((1, 4)), atol=1e-15)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_loss_uniform_logits_is_ln2():
    logits = ad.Tensor([[0.0], [0.0]])
    assert model.cross_entropy(logits, 1).item() == pytest.approx(LN2, abs=1e-12)
    assert model.cross_entropy(logits, 0).item() == pytest.approx(LN2, abs=1e-12)


def test_loss_perfect_prediction_goes_to_zero():
    logits = ad.Tensor([[-20.0], [20.0]])
    assert model.cross_entropy(logits, 1).item() < 1e-8


def test_loss_hand_value():
    # p1 = e^-1 / (e^1 + e^-1) so the loss for label 0 is log(1 + e^-2)
    logits = ad.Tensor([[1.0], [-1.0]])
    expected = math.log(1.0 + math.exp(-2.0))
    assert model.cross_entropy(logits, 0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.12692801104297263, abs=1e-15)


def test_loss_nonnegative_random(rng):
    for _ in range(50):
        logits = ad.Tensor(rng.uniform(-4, 4, (2, 1)))
        y = int(rng.integers(0, 2))
        assert model.cross_entropy(logits, y).item() >= 0.0


def test_predicted_label_tie_goes_to_real():
    assert model.predicted_label(np.array([0.5, 0.5])) == 0
    assert model.predicted_label(np.array([0.4, 0.6])) == 1
    assert model.predicted_label(np.array([0.6, 0.4])) == 0


# ---------------------------------------------------------------------------
# adam
# ---------------------------------------------------------------------------


class _BareParams:
    """Minimal stand-in exposing the named-tensor interface."""

    def __init__(self, **tensors):
        self._tensors = tensors

    def named(self):
        return dict(self._tensors)


def test_adam_first_step_magnitude():
    x = ad.Tensor([[2.0, -3.0]], requires_grad=True)
    x.grad = np.array([[1.0, -0.5]])
    params = _BareParams(x=x)
    state = model.AdamState.create(params)
    before = x.data.copy()
    model.adam_step(params, state, lr=0.01)
    delta = x.data - before
    assert (np.abs(delta) <= 0.01 + 1e-15).all()
    assert (np.abs(delta) >= 0.01 * (1 - 1e-6)).all()
    assert np.sign(delta[0, 0]) == -1 and np.sign(delta[0, 1]) == 1


def test_adam_zero_gradient_no_movement():
    x = ad.Tensor([[1.0, 2.0]], requires_grad=True)
    x.grad = np.zeros((1, 2))
    params = _BareParams(x=x)
    state = model.AdamState.create(params)
    before = x.data.copy()
    for _ in range(5):
        model.adam_step(params, state, lr=0.1)
    npt.assert_array_equal(x.data, before)


def test_adam_three_steps_match_hand_run():
    x = ad.Tensor([[1.0]], requires_grad=True)
    params = _BareParams(x=x)
    state = model.AdamState.create(params)
    # hand-run the update equations for f(x) = x^2
    xe, m, v = 1.0, 0.0, 0.0
    expected = []
    for t in range(1, 4):
        g = 2.0 * xe
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        m_hat = m / (1 - 0.9 ** t)
        v_hat = v / (1 - 0.999 ** t)
        xe -= 0.1 * m_hat / (math.sqrt(v_hat) + 1e-8)
        expected.append(xe)
    for t in range(3):
        x.grad = 2.0 * x.data
        model.adam_step(params, state, lr=0.1)
        assert x.data[0, 0] == pytest.approx(expected[t], abs=1e-15)


def test_adam_non_finite_gradient_fails_fast():
    x = ad.Tensor([[1.0]], requires_grad=True)
    x.grad = np.array([[np.nan]])
    params = _BareParams(x=x)
    state = model.AdamState.create(params)
    with pytest.raises(ad.NonFiniteError):
        model.adam_step(params, state, lr=0.1)


def test_clip_gradients_scales_to_max_norm():
    x = ad.Tensor([[3.0]], requires_grad=True)
    y = ad.Tensor([[4.0]], requires_grad=True)
    x.grad = np.array([[3.0]])
    y.grad = np.array([[4.0]])
    params = _BareParams(x=x, y=y)
    norm = model.clip_gradients(params, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(float(x.grad[0, 0] ** 2 + y.grad[0, 0] ** 2))
    assert total == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------


def test_ablate_full_mode_is_identity(tiny_setup):
    _, _, _, _, samples = tiny_setup
    out = model.ablate(samples[0], "N+C+E")
    npt.assert_array_equal(out.entity_ids, samples[0].entity_ids)
    npt.assert_array_equal(out.comment_ids, samples[0].comment_ids)


def test_ablate_drops_entity_side(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    out = model.ablate(samples[0], "N+C")
    assert (out.entity_ids == 0).all()
    assert not out.entity_sent_mask.any()
    npt.assert_array_equal(out.comment_ids, samples[0].comment_ids)
    # the pooled entity vector collapses to the padding fallback (zero)
    enc = model.encode_sample(out, params, emb, hp)
    co = layers.co_attention(enc.news, enc.entities, enc.news_mask,
                             np.ones(hp.max_entity_sentences, dtype=bool),
                             params.entity_coattn)
    npt.assert_allclose(co.pooled_secondary.data, np.zeros((1, 4)), atol=1e-15)


def test_ablate_changes_logits_when_side_carried_content(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    full, _ = model.run_sample(samples[0], params, emb, hp)
    no_comments, _ = model.run_sample(model.ablate(samples[0], "N+E"), params, emb, hp)
    assert np.abs(full.data - no_comments.data).max() > 0


def test_ablate_rejects_unknown_mode(tiny_setup):
    _, _, _, _, samples = tiny_setup
    with pytest.raises(ValueError):
        model.ablate(samples[0], "N")


# ---------------------------------------------------------------------------
# inertness
# ---------------------------------------------------------------------------


def _perturb_masked_positions(sample, rng, vocab_size):
    noisy = sample.copy()
    for ids, word_mask, sent_mask in (
            (noisy.news_ids, noisy.news_word_mask, noisy.news_sent_mask),
            (noisy.entity_ids, noisy.entity_word_mask, noisy.entity_sent_mask),
            (noisy.comment_ids, noisy.comment_word_mask, noisy.comment_sent_mask)):
        pad_cells = ~word_mask
        ids[pad_cells] = rng.integers(2, vocab_size, size=int(pad_cells.sum()))
    return noisy


def test_padding_positions_are_exactly_inert(tiny_setup, rng):
    hp, params, vocab, emb, samples = tiny_setup
    for sample in samples:
        base, _ = model.run_sample(sample, params, emb, hp)
        for _ in range(5):
            noisy = _perturb_masked_positions(sample, rng, len(vocab))
            out, _ = model.run_sample(noisy, params, emb, hp)
            npt.assert_array_equal(out.data, base.data)


def test_appending_pad_slots_leaves_logits_unchanged(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    doc = tiny_documents()[0]
    sample_small = data.encode_document(doc, vocab, hp)
    import dataclasses
    hp_wide = dataclasses.replace(hp, max_news_sentences=4, max_entity_sentences=5,
                                  max_comment_sentences=6, max_words=5)
    sample_wide = data.encode_document(doc, vocab, hp_wide)
    logits_a, _ = model.run_sample(sample_small, params, emb, hp)
    logits_b, _ = model.run_sample(sample_wide, params, emb, hp_wide)
    npt.assert_allclose(logits_a.data, logits_b.data, atol=1e-12)


def test_truncated_document_content_is_inert(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    doc = data.Document(
        "x",
        news_sentences=[["alpha", "beta", "gamma", "delta", "eps"],
                        ["zeta"], ["eta"], ["theta"]],
        comment_sentences=[["iota"], ["kappa"], ["alpha"]],
        entity_descriptions=[("acme", [["beta"], ["gamma"], ["delta"]])],
        label=0)
    altered = data.Document(
        "x",
        news_sentences=[["alpha", "beta", "gamma", "kappa", "iota"],
                        ["zeta"], ["delta"], ["eps"]],
        comment_sentences=[["iota"], ["kappa"], ["theta"]],
        entity_descriptions=[("acme", [["beta"], ["gamma"], ["iota"]])],
        label=0)
    a = data.encode_document(doc, vocab, hp)
    b = data.encode_document(altered, vocab, hp)
    npt.assert_array_equal(a.news_ids, b.news_ids)
    la, _ = model.run_sample(a, params, emb, hp)
    lb, _ = model.run_sample(b, params, emb, hp)
    npt.assert_array_equal(la.data, lb.data)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _toy_split(hp, vocab, emb, n=6):
    rng = np.random.default_rng(0)
    from conftest import random_document

    tokens = vocab.tokens()
    docs = []
    while len(docs) < n:
        doc = random_document(rng, f"t{len(docs)}", tokens)
        docs.append(doc)
    labels = [0, 1] * (n // 2)
    docs = [data.Document(d.doc_id, d.news_sentences, d.comment_sentences,
                          d.entity_descriptions, labels[i]) for i, d in enumerate(docs)]
    return [data.encode_document(d, vocab, hp) for d in docs]


def test_train_zero_learning_rate_keeps_params(tiny_setup):
    hp, params, vocab, emb, _ = tiny_setup
    import dataclasses
    hp0 = dataclasses.replace(hp, learning_rate=0.0, max_epochs=2)
    samples = _toy_split(hp0, vocab, emb)
    before = params.copy_values()
    result = model.train(samples, samples, hp0, params, emb)
    after = result.params.copy_values()
    for name in before:
        npt.assert_array_equal(before[name], after[name])


def test_train_same_seed_identical_history(tiny_setup):
    hp, _, vocab, emb, _ = tiny_setup
    import dataclasses
    hp2 = dataclasses.replace(hp, max_epochs=3, learning_rate=0.01)
    samples = _toy_split(hp2, vocab, emb)
    runs = []
    for _ in range(2):
        params = model.ModelParams.create(hp2)
        result = model.train(samples, samples, hp2, params, emb)
        runs.append(result)
    assert [h.train_loss for h in runs[0].history] == [h.train_loss for h in runs[1].history]
    va = runs[0].params.copy_values()
    vb = runs[1].params.copy_values()
    for name in va:
        npt.assert_array_equal(va[name], vb[name])


def test_train_loss_decreases(tiny_setup):
    hp, _, vocab, emb, _ = tiny_setup
    import dataclasses
    hp2 = dataclasses.replace(hp, max_epochs=8, learning_rate=0.02, patience=8)
    samples = _toy_split(hp2, vocab, emb, n=6)
    params = model.ModelParams.create(hp2)
    result = model.train(samples, samples, hp2, params, emb)
    assert result.history[-1].train_loss < result.history[0].train_loss


def test_train_rejects_empty_split(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    with pytest.raises(ValueError):
        model.train([], samples, hp, params, emb)


def test_training_step_clean_under_debug_checks(tiny_setup):
    hp, params, _, emb, samples = tiny_setup
    ad.set_debug_checks(True)
    try:
        state = model.AdamState.create(params)
        params.zero_grads()
        g = ad.Graph()
        with g:
            encoded = model.encode_samples(samples, params, emb, hp)
            losses = [model.cross_entropy(model.forward(e, params)[0], e.label)
                      for e in encoded]
            loss = ad.mean_all(ad.concat(losses, axis=1))
        g.backward(loss)
        model.clip_gradients(params, model.GRAD_CLIP_NORM)
        model.adam_step(params, state, hp.learning_rate)
    finally:
        ad.set_debug_checks(False)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tiny_setup, tmp_path):
    hp, params, _, _, _ = tiny_setup
    path = tmp_path / "model.bin"
    model.save_checkpoint(path, hp, params)
    hp_back, values = model.load_checkpoint(path)
    assert hp_back == hp
    named = params.named()
    assert set(values) == set(named)
    for name, tensor in named.items():
        npt.assert_array_equal(values[name], tensor.data)
    restored = model.restore_params(hp_back, values)
    for name, tensor in restored.named().items():
        npt.assert_array_equal(tensor.data, named[name].data)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"not a checkpoint\n")
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(path)


def test_checkpoint_rejects_truncated_payload(tiny_setup, tmp_path):
    hp, params, _, _, _ = tiny_setup
    path = tmp_path / "model.bin"
    model.save_checkpoint(path, hp, params)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(model.CheckpointError):
        model.load_checkpoint(path)


def test_hyperparams_profiles():
    g = model.HyperParams.profile("gossipcop")
    assert (g.embedding_dim, g.hidden_size, g.max_words) == (100, 100, 120)
    assert (g.max_news_sentences, g.max_entity_sentences, g.max_comment_sentences) == (40, 100, 100)
    assert (g.batch_size, g.learning_rate) == (16, 0.001)
    c = model.HyperParams.profile("coaid")
    assert (c.embedding_dim, c.hidden_size) == (300, 300)
    assert (c.max_news_sentences, c.max_entity_sentences, c.max_comment_sentences) == (4, 20, 20)
    assert (c.batch_size, c.learning_rate) == (32, 0.001)
    assert g.max_sentences_per_description == 4
    assert g.max_sentences_per_comment == 2
    with pytest.raises(ValueError):
        model.HyperParams.profile("unknown")


def test_hyperparams_validate():
    import dataclasses
    hp = model.HyperParams()
    hp.validate()
    with pytest.raises(ValueError):
        dataclasses.replace(hp, hidden_size=0).validate()
    with pytest.raises(ValueError):
        dataclasses.replace(hp, learning_rate=-1.0).validate()


def test_gossipcop_profile_forward_shapes():
    # one forward at the published dimensions: h=100 means 8h=800 head input
    hp = model.HyperParams.profile("gossipcop")
    params = model.ModelParams.create(hp, seed=0)
    assert params.head_w1.shape == (200, 800)
    assert params.head_w2.shape == (2, 200)
    vocab = tiny_vocab()
    emb = tiny_embeddings(vocab, hp.embedding_dim)
    doc = tiny_documents()[0]
    sample = data.encode_document(doc, vocab, hp)
    assert sample.news_ids.shape == (40, 120)
    assert sample.entity_ids.shape == (100, 120)
    logits, attn = model.run_sample(sample, params, emb, hp)
    assert logits.shape == (2, 1)
    assert attn.entity.shape == (100,)
    assert abs(attn.news_entity.sum() - 1.0) <= 1e-10
