import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from mecd.annotations import MAX_CAPTION_LEN
from mecd.causal import (
    CorrectionInputs,
    correction_inputs,
    corrections,
    counterfactual_gate,
    counterfactual_removal,
    front_door_compensation,
    refine,
)
from mecd.errors import DimensionError
from mecd.model import collate

import oracles
from helpers import toy_model, toy_video


def random_inputs(d, seed, has_prev=True, has_next=True, batch=()):
    g = torch.Generator().manual_seed(seed)
    vec = lambda: torch.randn(*batch, d, generator=g, dtype=torch.float64)  # noqa: E731
    tokens = torch.randint(0, 20, (*batch, MAX_CAPTION_LEN), generator=g)
    flag = lambda v: torch.full(batch, v, dtype=torch.bool)  # noqa: E731
    return CorrectionInputs(vec(), vec(), vec(), tokens, flag(has_prev), flag(has_next))


@given(st.integers(0, 10_000))
def test_front_door_matches_oracle(seed):
    model = toy_model(seed % 50, d=2, heads=1)
    inp = random_inputs(2, seed)
    p = oracles.params_of(model)
    _, o = oracles.predict(p, inp.emb_k.numpy()[None], 1, 1, 1)
    want = o[-1] - oracles.do_event(p, inp.emb_k.numpy(), inp.emb_next.numpy(), inp.cot_tokens.numpy(), 1)
    got = front_door_compensation(model, inp).detach().numpy()
    np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-12)


@given(st.integers(0, 10_000))
def test_counterfactual_matches_oracle(seed):
    model = toy_model(seed % 50, d=2, heads=1)
    inp = random_inputs(2, seed)
    p = oracles.params_of(model)
    _, o = oracles.predict(p, inp.emb_next.numpy()[None], 1, 1, 1)
    s = oracles.gate(inp.emb_next.numpy(), inp.emb_k.numpy(), inp.emb_k0.numpy())
    got = counterfactual_removal(model, inp).detach().numpy()
    np.testing.assert_allclose(got, o[-1] * (1 - s), rtol=1e-9, atol=1e-12)


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_boundary_terms_are_exactly_zero(seed, d):
    model = toy_model(seed % 20, d=d, heads=1)
    f_c = front_door_compensation(model, random_inputs(d, seed, has_prev=False))
    f_r = counterfactual_removal(model, random_inputs(d, seed, has_next=False))
    assert torch.all(f_c == 0) and torch.all(f_r == 0)


@given(st.integers(0, 10_000), st.sampled_from([2, 4, 8]))
def test_identical_counterfactual_leaves_pairwise_prediction(seed, d):
    model = toy_model(seed % 20, d=d, heads=1)
    inp = random_inputs(d, seed)
    inp.emb_k0 = inp.emb_k.clone()
    assert torch.all(counterfactual_gate(inp.emb_next, inp.emb_k, inp.emb_k0) == 0)
    p_next = model.pairwise_predict(inp.emb_next)
    assert torch.equal(counterfactual_removal(model, inp), p_next)


@given(st.integers(0, 10_000), st.floats(-3, 3), st.sampled_from([2, 4, 8]))
def test_equal_corrections_are_the_identity(seed, alpha, d):
    model = toy_model(seed % 20, alpha=alpha, d=d, heads=1)
    g = torch.Generator().manual_seed(seed)
    o_m = torch.randn(3, d, generator=g, dtype=torch.float64)
    f = torch.randn(3, d, generator=g, dtype=torch.float64)
    assert torch.equal(refine(model, o_m, f, f.clone()), o_m)


def test_refine_formula():
    model = toy_model(4, alpha=0.7, d=4, heads=2)
    g = torch.Generator().manual_seed(4)
    o_m, f_c, f_r = (torch.randn(4, dtype=torch.float64, generator=g) for _ in range(3))
    dec = model.decode_single
    torch.testing.assert_close(refine(model, o_m, f_c, f_r), o_m + 0.7 * (dec(f_r) - dec(f_c)))
    torch.testing.assert_close(refine(model, o_m, f_c=f_c), o_m - 0.7 * dec(f_c))
    torch.testing.assert_close(refine(model, o_m, f_r=f_r), o_m + 0.7 * dec(f_r))
    assert refine(model, o_m) is o_m


@pytest.mark.parametrize("flags", [(True, True), (True, False), (False, True), (False, False)])
def test_toggles(flags):
    model = toy_model(6, alpha=0.5, d=4, heads=2, front_door=flags[0], counterfactual=flags[1])
    batch = collate([toy_video(n=5, seed=6)])
    out, logits, _ = model(batch)
    assert ("F_C" in out.extras) == flags[0]
    assert ("F_R" in out.extras) == flags[1]
    refined = out.extras["O_m_refined"]
    if not any(flags):
        assert torch.equal(refined, out.O_m)
    else:
        assert not torch.equal(refined, out.O_m)
    k = out.O_m.shape[1]
    plain = model.relation(refined, out.O_p.unsqueeze(1).expand(-1, k, -1), out.O_N.unsqueeze(1).expand(-1, k, -1))
    assert torch.equal(plain, logits)


def test_zero_scale_corrections_leave_masked_path_bit_exact():
    on = toy_model(7, d=4, heads=2)
    off = toy_model(7, d=4, heads=2, front_door=False, counterfactual=False)
    batch = collate([toy_video(n=5, seed=7)])
    assert torch.equal(on(batch)[1], off(batch)[1])


def test_batched_corrections_match_single_terms():
    model = toy_model(8, alpha=0.3, d=4, heads=2)
    video = toy_video(n=5, seed=8)
    batch = collate([video])
    out, _, _ = model(batch)
    inp = correction_inputs(model, batch, out.emb)
    emb = out.emb[0]
    for k in range(1, 5):
        one = CorrectionInputs(emb[k - 1], emb[k], inp.emb_k0[0, k - 1], batch.cot[0, k - 1],
                               torch.tensor(k > 1), torch.tensor(k < 4))
        torch.testing.assert_close(out.extras["F_C"][0, k - 1], front_door_compensation(model, one))
        torch.testing.assert_close(out.extras["F_R"][0, k - 1], counterfactual_removal(model, one))


def test_next_event_at_last_premise_is_result():
    model = toy_model(9, d=4, heads=2)
    batch = collate([toy_video(n=4, seed=9)])
    out = model.streams(batch)
    inp = correction_inputs(model, batch, out.emb)
    assert torch.equal(inp.emb_next[0, -1], out.emb[0, -1])
    assert inp.has_prev.tolist() == [[False, True, True]]
    assert inp.has_next.tolist() == [[True, True, False]]


def test_refined_output_gradient_matches_finite_differences():
    model = toy_model(10, alpha=0.8, d=4, heads=2)
    batch = collate([toy_video(n=4, seed=10)])
    visual = batch.visual.clone().requires_grad_(True)

    def objective(v):
        b = type(batch)(batch.ids, v, batch.captions, batch.existence, batch.cot, batch.relation)
        out = model.streams(b)
        refined, _ = corrections(model, b, out)
        return (refined ** 2).sum()

    objective(visual).backward()
    eps = 1e-6
    flat = batch.visual.clone().reshape(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += eps
        down[i] -= eps
        with torch.no_grad():
            num = (objective(up.view_as(visual)) - objective(down.view_as(visual))) / (2 * eps)
        assert abs(float(num) - float(visual.grad.view(-1)[i])) <= 1e-6 * max(1.0, abs(float(num)))


def test_width_checks():
    model = toy_model(0, d=4, heads=2)
    with pytest.raises(DimensionError):
        front_door_compensation(model, random_inputs(3, 0))
    with pytest.raises(DimensionError):
        counterfactual_removal(model, random_inputs(5, 0))
