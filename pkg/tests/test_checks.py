import numpy as np
import pytest

from rsnet import wavelet
from rsnet.checks import check_names, hand_built_case, run_checks
from rsnet.errors import RsnetError
from rsnet.metrics import brute_force_ap, evaluate

FAST_CHECKS = ["wavelet.orthonormal", "wavelet.reconstruction", "conv.adjoint", "eval.oracle", "nms.oracle",
               "checkpoint.roundtrip", "model.determinism"]


def test_registry_lists_every_check():
    names = check_names()
    assert set(FAST_CHECKS) <= set(names)
    assert {"grad.ops", "grad.blocks", "grad.model", "params.oracle", "params.budget", "params.ablation"} <= set(names)


def test_fast_checks_pass():
    results = run_checks(FAST_CHECKS)

    assert [r.name for r in results] == FAST_CHECKS
    failed = {r.name: r.detail for r in results if not r.ok}
    assert failed == {}


def test_unknown_check_name():
    with pytest.raises(RsnetError, match="unknown checks: nope"):
        run_checks(["nope"])


def test_broken_filter_bank_fails_the_orthonormality_check(monkeypatch):
    bank = wavelet.FILTER_BANK.copy()
    bank[0] *= 2
    monkeypatch.setattr(wavelet, "FILTER_BANK", bank)

    (result,) = run_checks(["wavelet.orthonormal"])

    assert not result.ok
    assert "Gram matrix" in result.detail


def test_hand_built_case_matches_both_evaluators():
    dets, truth, expected = hand_built_case()

    assert evaluate(dets, truth).map50 == pytest.approx(expected)
    assert brute_force_ap(dets, truth, 0, 0.5) == pytest.approx(expected)
    assert np.isclose(expected, 5 / 9)
