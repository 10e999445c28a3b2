import json

import numpy as np
import pytest

from siammae import nn as N
from siammae import tensor as T
from siammae import verify as V
from siammae.cli import main


def _bad_exp(a):
    a = T.as_tensor(a)
    out = np.exp(a.data)
    return T._make(out, (a,), lambda g: (-g * out,), "exp")


_good_gelu = T.gelu


def _bad_gelu(a):
    # forward is right, the gradient sign is flipped
    a = T.as_tensor(a)
    probe = T.Tensor(a.data, requires_grad=True)
    out = _good_gelu(probe)

    def backward(g):
        probe.grad = None
        out.backward(g)
        return (-probe.grad,)

    return T._make(out.data, (a,), backward, "gelu")


def test_ops_pass():
    results = V.check_ops(seeds=3)
    assert all(r.passed for r in results), [r for r in results if not r.passed]


def test_injected_sign_error_fails_op_check(monkeypatch):
    monkeypatch.setattr(T, "exp", _bad_exp)
    by_name = {r.name: r for r in V.check_ops(seeds=2)}
    assert not by_name["grad/exp"].passed
    assert by_name["grad/add"].passed


def test_injected_sign_error_fails_full_loss(monkeypatch):
    good = V.check_full_loss(seeds=1)
    assert good.passed
    monkeypatch.setattr(T, "gelu", _bad_gelu)
    monkeypatch.setattr(N, "gelu", _bad_gelu, raising=False)
    assert not V.check_full_loss(seeds=1).passed


def test_masking_and_metric_checks_pass():
    assert all(r.passed for r in V.check_masking(max_n=128))
    assert all(r.passed for r in V.check_metrics(n=30))


def test_report_lines():
    rep = V.VerifyReport([V.CheckResult("a", True, 0.0), V.CheckResult("b", False, 1.0)], 0.5)
    assert not rep.passed
    lines = rep.lines()
    assert any("FAIL" in l and "b" in l for l in lines)


@pytest.mark.slow
def test_verify_command_passes(tmp_path):
    assert main(["verify", "--seeds", "2", "--out", str(tmp_path), "-q"]) == 0
    doc = json.loads((tmp_path / "verify.json").read_text())
    assert doc["passed"] and len(doc["checks"]) >= 30
