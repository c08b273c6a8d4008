import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from brainalign.core import BrainSample, EncoderConfig, FeatureGrid, SubjectSpec, new_rng
from brainalign.encoder import (analytic_gradients, count_parameters, encode, forward, forward_batch,
                                gradient_check, init_encoder, parameter_arrays, perceiver_layer_parameters,
                                tokenize)

BRAINHUB_DIMS = {"S1": 15724, "S2": 14278, "S5": 13039, "S7": 12682}


def _sample(state, sid, seed=0):
    r = new_rng(seed)
    return BrainSample(sid, r.standard_normal(state.specs[sid].voxel_dim),
                       FeatureGrid(r.standard_normal(state.config.grid_shape)))


def test_single_spec_init(toy_config):
    state = init_encoder(toy_config, [SubjectSpec("S1", 9)], new_rng(0))
    assert list(state.tokenizers) == ["S1"]
    assert state.perceiver is not None


def test_tokenizer_widths_follow_specs(toy_config):
    specs = [SubjectSpec(k, v) for k, v in BRAINHUB_DIMS.items()]
    state = init_encoder(toy_config, specs, new_rng(0))
    assert {k: t.proj.in_features for k, t in state.tokenizers.items()} == BRAINHUB_DIMS


def test_init_is_seeded(toy_config, two_specs):
    a = parameter_arrays(init_encoder(toy_config, two_specs, new_rng(3)))
    b = parameter_arrays(init_encoder(toy_config, two_specs, new_rng(3)))
    c = parameter_arrays(init_encoder(toy_config, two_specs, new_rng(4)))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_scheme(toy_config, two_specs):
    p = parameter_arrays(init_encoder(toy_config, two_specs, new_rng(0)))
    assert np.all(p["tokenizers.A.proj.bias"] == 0)
    assert np.all(p["perceiver.cross.norm_latents.weight"] == 1)
    w = p["tokenizers.B.proj.weight"]
    assert np.abs(w).max() <= 0.04 + 1e-7 and 0.01 < w.std() < 0.02


def test_init_errors(toy_config):
    with pytest.raises(ValueError):
        init_encoder(toy_config, [SubjectSpec("A", 3), SubjectSpec("A", 4)], new_rng(0))
    with pytest.raises(ValueError):
        init_encoder(toy_config, [], new_rng(0))
    with pytest.raises(ValueError):
        EncoderConfig(token_dim=0)


def test_tokenize_shape():
    cfg = EncoderConfig(token_count=32, token_dim=1024, subject_token_count=5, latent_query_count=1,
                        encoder_depth=0, attention_heads=8, output_channels=1)
    state = init_encoder(cfg, [SubjectSpec("S1", 4)], new_rng(0))
    assert tuple(tokenize(state, "S1", np.ones(4)).shape) == (37, 1024)


def test_zero_voxels_give_zero_brain_tokens(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    tok = tokenize(state, "A", np.zeros(7)).numpy()
    M = toy_config.subject_token_count
    assert np.all(tok[M:] == 0)
    np.testing.assert_array_equal(tok[:M], state.tokenizers["A"].subject_tokens.detach().numpy())


def test_distinct_subjects_tokenize_differently(toy_config):
    state = init_encoder(toy_config, [SubjectSpec("A", 6), SubjectSpec("B", 6)], new_rng(0))
    v = new_rng(1).standard_normal(6)
    assert not np.array_equal(tokenize(state, "A", v).numpy(), tokenize(state, "B", v).numpy())


def test_encode_shape_is_independent_of_row_count(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    r = new_rng(2)
    g37 = encode(state, r.standard_normal((37, toy_config.token_dim)))
    g69 = encode(state, r.standard_normal((69, toy_config.token_dim)))
    assert g37.shape == g69.shape == toy_config.grid_shape
    assert np.all(np.isfinite(g37.values)) and np.all(np.isfinite(g69.values))
    with pytest.raises(ValueError):
        encode(state, r.standard_normal((5, toy_config.token_dim + 1)))


def test_default_grid_shape_on_real_voxel_width():
    # the dense tokenizer at L=256, D=1024 would need ~4e9 weights for this width,
    # so L is lowered; the perceiver and head keep their default sizes
    cfg = EncoderConfig(token_count=1)
    state = init_encoder(cfg, [SubjectSpec("S1", BRAINHUB_DIMS["S1"])], new_rng(0))
    grid = forward(state, "S1", new_rng(1).standard_normal(BRAINHUB_DIMS["S1"]))
    assert grid.shape == (256, 1024)
    assert encode(state, np.zeros((37, 1024))).shape == (256, 1024)


def test_forward_deterministic_and_batch_matches_loop(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0)).double()
    vox = new_rng(5).standard_normal((6, 7))
    assert forward(state, "A", vox[0]) == forward(state, "A", vox[0])
    batch = forward_batch(state, "A", vox)
    loop = np.stack([forward(state, "A", v).values for v in vox])
    np.testing.assert_allclose(batch, loop, rtol=0, atol=1e-12)


def test_forward_errors(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    with pytest.raises(KeyError):
        forward(state, "Z", np.zeros(7))
    with pytest.raises(ValueError):
        forward(state, "A", np.zeros(8))


# ---- parameter counts ----

def test_hand_enumerated_count():
    cfg = EncoderConfig(token_count=1, token_dim=2, subject_token_count=1, latent_query_count=1,
                        encoder_depth=0, attention_heads=1, output_channels=2, ff_mult=4)
    state = init_encoder(cfg, [SubjectSpec("S1", 3)], new_rng(0))
    D, F = 2, 8
    ln = 2 * D
    tokenizer = 3 * (1 * D) + D + 1 * D                      # projection W, b; subject tokens
    attention = 3 * D * D + D * D + D                         # q, k, v (no bias); out with bias
    feedforward = D * F + F + F * D + D
    cross = ln + ln + attention + ln + feedforward            # norms on latents, tokens, ff input
    perceiver = 1 * D + cross + ln + D * 2 + 2                # latents, cross, final norm, head
    assert tokenizer == 10 and perceiver == 84
    assert count_parameters(state) == tokenizer + perceiver == 94


def test_second_subject_adds_one_tokenizer():
    cfg = EncoderConfig(token_count=1, token_dim=2, subject_token_count=1, latent_query_count=1,
                        encoder_depth=0, attention_heads=1, output_channels=2)
    one = count_parameters(init_encoder(cfg, [SubjectSpec("S1", 3)], new_rng(0)))
    two = count_parameters(init_encoder(cfg, [SubjectSpec("S1", 3), SubjectSpec("S2", 3)], new_rng(0)))
    assert two - one == 10


def test_depth_doubles_layer_parameters(toy_config, two_specs):
    a = init_encoder(toy_config, two_specs, new_rng(0))
    b = init_encoder(toy_config.override(encoder_depth=2 * toy_config.encoder_depth), two_specs, new_rng(0))
    assert perceiver_layer_parameters(b) == 2 * perceiver_layer_parameters(a) > 0


def test_perceiver_count_independent_of_subjects(toy_config):
    one = init_encoder(toy_config, [SubjectSpec("A", 4)], new_rng(0))
    many = init_encoder(toy_config, [SubjectSpec(f"S{i}", 4 + i) for i in range(5)], new_rng(0))
    assert count_parameters(one.perceiver) == count_parameters(many.perceiver)


# ---- gradients ----

def test_gradient_check_toy(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    assert gradient_check(state, _sample(state, "B"), eps=1e-5) < 1e-4


def test_unused_parameters_get_zero_gradient(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    grads = analytic_gradients(state, _sample(state, "A"))
    assert all(torch.all(g == 0) for n, g in grads.items() if n.startswith("tokenizers.B."))
    assert any(torch.any(g != 0) for n, g in grads.items() if n.startswith("tokenizers.A."))


def test_frozen_parameter_gradient_check(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    frozen = [n for n, _ in state.named_parameters() if n.startswith("tokenizers.B.")]
    assert gradient_check(state, _sample(state, "A"), frozen=frozen) < 1e-4


def test_loss_scale_scales_gradients(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    s = _sample(state, "A")
    g1, g2 = analytic_gradients(state, s), analytic_gradients(state, s, loss_scale=2.0)
    for n in g1:
        torch.testing.assert_close(g2[n], 2 * g1[n], rtol=1e-12, atol=0)


# ---- invariants ----

@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_subject_isolation(seed):
    cfg = EncoderConfig(token_count=2, token_dim=8, subject_token_count=1, latent_query_count=3,
                        encoder_depth=1, attention_heads=2, output_channels=4)
    state = init_encoder(cfg, [SubjectSpec("A", 5), SubjectSpec("B", 6)], new_rng(seed))
    v = new_rng(seed + 1).standard_normal(6)
    before = forward(state, "B", v)
    with torch.no_grad():
        for p in state.tokenizers["A"].parameters():
            p.add_(torch.from_numpy(new_rng(seed + 2).standard_normal(tuple(p.shape)).astype(np.float32)))
    assert forward(state, "B", v) == before


def test_perceiver_is_shared(toy_config, two_specs):
    state = init_encoder(toy_config, two_specs, new_rng(0))
    r = new_rng(9)
    inputs = {"A": r.standard_normal(7), "B": r.standard_normal(11)}
    before = {k: forward(state, k, v) for k, v in inputs.items()}
    with torch.no_grad():
        state.perceiver.latents.add_(0.5)
    assert all(forward(state, k, v) != before[k] for k, v in inputs.items())
