import math

import numpy as np
import pytest

from dirfed import backbone as bb
from dirfed import datagen, mixing
from dirfed.oracle import reference_nll


def _config(**kw):
    base = dict(vocab_size=21, embed_dim=8, max_seq_len=6, num_blocks=2, seed=3)
    base.update(kw)
    return bb.BackboneConfig(**base)


def _random_deltas(params, rng, scale=0.1):
    return {lid: scale * rng.standard_normal(shape) for lid, shape in params.target_shapes().items()}


def test_init_is_seeded_and_bounded():
    p1, p2 = bb.init_backbone(_config()), bb.init_backbone(_config())
    assert p1.checksum() == p2.checksum()
    assert not p1.frozen
    bound = 1.0 / math.sqrt(8)
    for arr in p1.arrays().values():
        assert np.all(np.abs(arr) <= bound)
    assert p1.checksum() != bb.init_backbone(_config(seed=4)).checksum()


def test_default_dims_give_eight_square_targets():
    params = bb.init_backbone(bb.BackboneConfig(vocab_size=301, embed_dim=32, max_seq_len=20, num_blocks=2))
    shapes = params.target_shapes()
    assert len(shapes) == 8
    assert set(shapes.values()) == {(32, 32)}


@pytest.mark.parametrize("field,value", [("embed_dim", 0), ("vocab_size", 1), ("max_seq_len", 1), ("num_blocks", 0)])
def test_invalid_dims(field, value):
    with pytest.raises(bb.ConfigError):
        bb.init_backbone(_config(**{field: value}))


def test_item_features_seed_embedding_and_output_rows(rng):
    feats = rng.standard_normal((20, 8))
    params = bb.init_backbone(_config(), item_features=feats)
    np.testing.assert_array_equal(params.token_embedding[1:], feats)
    np.testing.assert_array_equal(params.output_projection[1:], feats)
    with pytest.raises(bb.ConfigError):
        bb.init_backbone(_config(), item_features=feats[:5])


def test_snapshot_roundtrip(tiny_backbone):
    back = bb.BackboneParams.from_bytes(tiny_backbone.to_bytes())
    assert back.frozen
    assert back.checksum() == tiny_backbone.checksum()


def test_frozen_arrays_reject_writes(tiny_backbone):
    with pytest.raises(ValueError):
        tiny_backbone.token_embedding[0, 0] = 1.0


def test_uniform_output_rows_give_log_vocab_loss():
    params = bb.init_backbone(_config())
    params.output_projection[:] = 0.25
    loss, logits = bb.forward_loss(params, {}, [3, 4, 5], 7, np.arange(1, 11))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    assert np.ptp(logits) < 1e-12


def test_margin_closed_form():
    """With the target logit ahead of every other one by m, the loss is
    ln(1 + (V - 1) e^-m)."""
    params = bb.init_backbone(_config())
    h = bb._forward(params, {}, np.array([[3, 4]])).h[0]
    m, target = 1.7, 5
    cands = np.arange(1, 11)
    u = h / np.dot(h, h)
    params.output_projection[cands] = 0.0
    params.output_projection[target] = m * u
    loss, logits = bb.forward_loss(params, {}, [3, 4], target, cands)
    assert logits[target - 1] - logits[0] == pytest.approx(m)
    assert loss == pytest.approx(math.log(1 + 9 * math.exp(-m)), abs=1e-12)


def test_zero_deltas_equal_no_adapters(tiny_backbone):
    zeros = {lid: np.zeros(s) for lid, s in tiny_backbone.target_shapes().items()}
    cands = np.arange(1, 21)
    a, _ = bb.forward_loss(tiny_backbone, {}, [1, 2, 3], 4, cands)
    b, _ = bb.forward_loss(tiny_backbone, zeros, [1, 2, 3], 4, cands)
    assert a == b


def test_batched_loss_matches_reference_loop(tiny_backbone, rng):
    deltas = _random_deltas(tiny_backbone, rng)
    contexts = rng.integers(1, 21, size=(5, 4))
    targets = rng.integers(1, 21, size=5)
    cands = np.arange(1, 21)
    batch = bb.make_batch(contexts, targets, cands)
    assert bb.batch_loss(tiny_backbone, deltas, batch) == pytest.approx(
        reference_nll(tiny_backbone, deltas, contexts, targets, cands), abs=1e-12
    )


def test_injection_point_is_linear(tiny_backbone, rng):
    dirs = [_random_deltas(tiny_backbone, rng) for _ in range(3)]
    alpha = np.array([0.7, -0.2, 1.3])
    summed = {lid: sum(a * d[lid] for a, d in zip(alpha, dirs)) for lid in dirs[0]}
    cands = np.arange(1, 21)
    l1, _ = bb.forward_loss(tiny_backbone, summed, [2, 5, 9], 11, cands)
    pairs = {lid: [] for lid in dirs[0]}
    for d in dirs:
        for lid, m in d.items():
            pairs[lid].append((np.eye(8), m))  # B = D, A = I
    combined = {lid: mixing.combine(mixing.FEDECIDER, f, alpha) for lid, f in pairs.items()}
    l2, _ = bb.forward_loss(tiny_backbone, combined, [2, 5, 9], 11, cands)
    assert abs(l1 - l2) < 1e-12


def test_delta_gradients_match_finite_differences(tiny_backbone, rng):
    deltas = _random_deltas(tiny_backbone, rng)
    batch = bb.make_batch(rng.integers(1, 21, size=(4, 5)), rng.integers(1, 21, size=4), np.arange(1, 21))
    _, grads = bb.loss_and_delta_grads(tiny_backbone, deltas, batch)
    h = 1e-6
    for lid in ("block0.q", "block0.k", "block0.v", "block0.o"):
        e = np.zeros_like(deltas[lid])
        e[2, 5] = h
        plus = dict(deltas, **{lid: deltas[lid] + e})
        minus = dict(deltas, **{lid: deltas[lid] - e})
        fd = (bb.batch_loss(tiny_backbone, plus, batch) - bb.batch_loss(tiny_backbone, minus, batch)) / (2 * h)
        assert grads[lid][2, 5] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_full_gradients_match_finite_differences(rng):
    params = bb.init_backbone(_config())
    batch = bb.make_batch(rng.integers(1, 21, size=(3, 4)), rng.integers(1, 11, size=3), np.arange(1, 11))
    _, grads = bb.loss_and_delta_grads(params, {}, batch, full=True)
    h = 1e-6
    tok = int(batch.tokens[0, 1])
    for name, idx in [("token_embedding", (tok, 3)), ("positional_embedding", (2, 1)), ("output_projection", (4, 0))]:
        arr = getattr(params, name)
        old = arr[idx]
        arr[idx] = old + h
        fp = bb.batch_loss(params, {}, batch)
        arr[idx] = old - h
        fm = bb.batch_loss(params, {}, batch)
        arr[idx] = old
        assert grads[name][idx] == pytest.approx((fp - fm) / (2 * h), rel=1e-5, abs=1e-9)


def test_input_errors(tiny_backbone):
    cands = np.arange(1, 21)
    with pytest.raises(bb.InputError):
        bb.forward_loss(tiny_backbone, {}, list(range(1, 9)), 2, cands)  # longer than max_seq_len
    with pytest.raises(bb.InputError):
        bb.forward_loss(tiny_backbone, {}, [1, 99], 2, cands)
    with pytest.raises(bb.InputError):
        bb.forward_loss(tiny_backbone, {"block0.q": np.zeros((3, 3))}, [1, 2], 2, cands)
    with pytest.raises(bb.InputError):
        bb.forward_loss(tiny_backbone, {"nope": np.zeros((8, 8))}, [1, 2], 2, cands)
    with pytest.raises(bb.InputError):
        bb.forward_loss(tiny_backbone, {}, [1, 2], 15, np.arange(1, 11))


def test_grad_trainables_requires_frozen_backbone(rng):
    params = bb.init_backbone(_config())
    own = {lid: (rng.standard_normal((2, 8)), np.zeros((8, 2))) for lid in params.layer_ids}
    batch = bb.make_batch([[1, 2]], [3], np.arange(1, 21))
    with pytest.raises(bb.ContractViolation):
        bb.grad_trainables(params, mixing.LOCAL_ONLY, own, None, None, 0, batch)


def test_grad_trainables_leaves_backbone_untouched(tiny_backbone, rng):
    before = tiny_backbone.checksum()
    own = {lid: (rng.standard_normal((2, 8)), rng.standard_normal((8, 2))) for lid in tiny_backbone.layer_ids}
    batch = bb.make_batch(rng.integers(1, 21, size=(4, 3)), rng.integers(1, 21, size=4), np.arange(1, 21))
    g = bb.grad_trainables(tiny_backbone, mixing.LOCAL_ONLY, own, None, None, 0, batch)
    assert set(g.d_a) == set(tiny_backbone.layer_ids)
    assert g.d_alpha is None
    assert tiny_backbone.checksum() == before


def test_gradients_vanish_at_certain_prediction():
    params = bb.init_backbone(_config())
    h = bb._forward(params, {}, np.array([[3, 4]])).h[0]
    params.output_projection[1:11] = 0.0
    params.output_projection[5] = 200.0 * h / np.dot(h, h)
    params.freeze()
    own = {lid: (np.full((2, 8), 0.1), np.zeros((8, 2))) for lid in params.layer_ids}
    batch = bb.make_batch([[3, 4]], [5], np.arange(1, 11))
    g = bb.grad_trainables(params, mixing.LOCAL_ONLY, own, None, None, 0, batch)
    assert g.loss < 1e-12
    assert max(np.linalg.norm(v) for v in list(g.d_a.values()) + list(g.d_b.values())) < 1e-8


def test_non_finite_loss_reports_batch():
    params = bb.init_backbone(_config())
    params.output_projection[1:] = np.inf
    batch = bb.make_batch([[1, 2]], [3], np.arange(1, 21), batch_id=(0, 1, 2, 3))
    with pytest.raises(bb.NumericError) as info, np.errstate(invalid="ignore"):
        bb.loss_and_delta_grads(params, {}, batch)
    assert info.value.batch_id == (0, 1, 2, 3)


def test_pretraining_lowers_pooled_loss():
    world = datagen.DomainWorld(seed=7, pooled_size=500)
    gen = datagen.generate_world(world)
    cfg = bb.BackboneConfig(vocab_size=world.total_items + 1, embed_dim=32, max_seq_len=20, num_blocks=2, seed=1)
    params = bb.init_backbone(cfg, gen.item_features)
    batches = []
    for dom, seq in gen.pooled:
        offset = world.domain_offset(dom)
        cands = np.arange(offset, offset + world.vocab_size)
        for t in range(1, len(seq)):
            batches.append(bb.make_batch([seq[:t]], [seq[t]], cands))
    batches = batches[:2000]
    before = bb.mean_loss(params, batches)
    trained, history = bb.pretrain_backbone(params, batches, epochs=3, lr=0.05)
    assert trained.frozen and not params.frozen
    assert history[-1] < history[0]
    assert bb.mean_loss(trained, batches) < before


def test_pretraining_contracts(tiny_backbone):
    params = bb.init_backbone(_config())
    batch = bb.make_batch([[1, 2]], [3], np.arange(1, 21))
    same, history = bb.pretrain_backbone(params, [batch], epochs=0, lr=0.1)
    assert same.frozen and history == []
    assert same.checksum() == params.checksum()
    with pytest.raises(bb.ContractViolation):
        bb.pretrain_backbone(tiny_backbone, [batch], epochs=1, lr=0.1)
    with pytest.raises(bb.ContractViolation):
        bb.pretrain_backbone(bb.init_backbone(_config()), [], epochs=1, lr=0.1)
