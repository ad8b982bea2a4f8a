"""Selective scan: blocked evaluation must agree with the plain recurrence."""

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from fundusrisk.errors import NumericError, ValidationError
from fundusrisk.scan import ScanParams, scan_blocked, scan_sequential, selective_scan_1d

torch.manual_seed(0)


def random_case(b, c, n, length, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)

    def r(*shape):
        return torch.randn(*shape, generator=g, dtype=dtype)

    x = r(b, length, c)
    delta = torch.nn.functional.softplus(r(b, length, c))
    A = -torch.exp(r(c, n))
    B = r(b, length, n)
    C = r(b, length, n)
    D = r(c)
    return x, delta, A, B, C, D


def rel_err(a, b):
    return (a - b).abs().max().item() / (b.abs().max().item() + 1e-12)


def test_known_value_running_sum():
    # decay 1 (A=0 ~ exp(0)), unit input gain: state accumulates x, output reads it
    x = torch.tensor([[[1.0], [2.0], [3.0]]], dtype=torch.float64)
    delta = torch.ones_like(x)
    A = torch.zeros(1, 1, dtype=torch.float64)
    B = torch.ones(1, 3, 1, dtype=torch.float64)
    C = torch.ones(1, 3, 1, dtype=torch.float64)
    out = scan_sequential(x, delta, A, B, C)
    assert torch.allclose(out, torch.tensor([[[1.0], [3.0], [6.0]]], dtype=torch.float64))
    out_blocked = scan_blocked(x, delta, A, B, C, chunk=2)
    assert torch.allclose(out_blocked, out, atol=1e-12)


def test_skip_term_adds_dx():
    x, delta, A, B, C, D = random_case(2, 3, 4, 10, seed=1)
    with_d = scan_sequential(x, delta, A, B, C, D)
    without = scan_sequential(x, delta, A, B, C)
    assert torch.allclose(with_d - without, x * D, atol=1e-12)


@pytest.mark.parametrize("length", [1, 2, 7, 8, 9, 16, 17, 64, 256])
def test_blocked_matches_sequential(length):
    x, delta, A, B, C, D = random_case(2, 3, 4, length, seed=length)
    ref = scan_sequential(x, delta, A, B, C, D)
    out = scan_blocked(x, delta, A, B, C, D, chunk=8)
    assert rel_err(out, ref) < 1e-12


@pytest.mark.parametrize("chunk", [1, 3, 5, 64])
def test_chunk_size_has_no_effect(chunk):
    x, delta, A, B, C, D = random_case(1, 2, 3, 20, seed=5)
    ref = scan_blocked(x, delta, A, B, C, D, chunk=8)
    out = scan_blocked(x, delta, A, B, C, D, chunk=chunk)
    assert torch.allclose(out, ref, atol=1e-10)


@given(
    b=st.integers(1, 3),
    c=st.integers(1, 4),
    n=st.integers(1, 4),
    length=st.integers(1, 40),
    seed=st.integers(0, 10_000),
)
def test_blocked_matches_sequential_property(b, c, n, length, seed):
    x, delta, A, B, C, D = random_case(b, c, n, length, seed=seed)
    ref = scan_sequential(x, delta, A, B, C, D)
    out = scan_blocked(x, delta, A, B, C, D, chunk=8)
    assert rel_err(out, ref) < 1e-10


def test_float32_agreement():
    x, delta, A, B, C, D = random_case(2, 4, 4, 100, seed=9, dtype=torch.float32)
    ref = scan_sequential(x, delta, A, B, C, D)
    out = scan_blocked(x, delta, A, B, C, D, chunk=8)
    assert rel_err(out, ref) < 1e-5


def test_memoryless_limit_is_pointwise():
    # with a huge decay the state forgets instantly: y_t = C_t . (delta_t B_t x_t)
    x, delta, _, B, C, _ = random_case(2, 3, 4, 12, seed=11)
    A = torch.full((3, 4), -1e6, dtype=torch.float64)
    out = scan_sequential(x, delta, A, B, C)
    expect = torch.einsum("bln,blc,bln,blc->blc",
                          C, delta, B, x)
    assert torch.allclose(out, expect, atol=1e-12)
    assert torch.allclose(scan_blocked(x, delta, A, B, C, chunk=4), expect, atol=1e-12)


def test_gradients_flow():
    x, delta, A, B, C, D = random_case(1, 2, 2, 6, seed=2)
    for t in (x, delta, A, B, C, D):
        t.requires_grad_(True)
    out = scan_blocked(x, delta, A, B, C, D, chunk=4)
    out.sum().backward()
    for t in (x, delta, A, B, C, D):
        assert t.grad is not None
        assert torch.isfinite(t.grad).all()


def test_empty_sequence_rejected():
    p = ScanParams(channels=2, state_dim=2)
    with pytest.raises(NumericError):
        selective_scan_1d(torch.zeros(1, 0, 2), p)


def test_nonfinite_params_rejected():
    p = ScanParams(channels=2, state_dim=2)
    with torch.no_grad():
        p.D[0] = float("nan")
    with pytest.raises(NumericError):
        selective_scan_1d(torch.zeros(1, 4, 2), p)


class TestScanParams:
    def test_state_matrix_init(self):
        p = ScanParams(channels=5, state_dim=3)
        expect = -torch.arange(1.0, 4.0).expand(5, 3)
        assert torch.allclose(p.A, expect)

    def test_delta_positive(self):
        p = ScanParams(channels=4, state_dim=2)
        x = torch.randn(2, 9, 4)
        delta, B, C = p.prepare(x)
        assert (delta > 0).all()
        assert B.shape == (2, 9, 2)
        assert C.shape == (2, 9, 2)

    def test_token_projections_bias_free(self):
        p = ScanParams(channels=4, state_dim=2)
        assert p.b_proj.bias is None
        assert p.c_proj.bias is None
        assert torch.equal(p.D, torch.ones(4))

    def test_module_scan_modes_agree(self):
        torch.manual_seed(3)
        p = ScanParams(channels=4, state_dim=3).double()
        x = torch.randn(2, 15, 4, dtype=torch.float64)
        blocked = selective_scan_1d(x, p, mode="blocked", chunk=4)
        seq = selective_scan_1d(x, p, mode="sequential")
        assert torch.allclose(blocked, seq, atol=1e-10)

    def test_unknown_mode(self):
        p = ScanParams(channels=2, state_dim=2)
        with pytest.raises(ValidationError):
            selective_scan_1d(torch.randn(1, 4, 2), p, mode="fancy")
