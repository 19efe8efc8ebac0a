import numpy as np
import pytest

from regla import verify
from regla.attention import GateVariant


def test_equivalence_trials_pass_and_cover_negative_queries():
    report = verify.equivalence_trials(seed=3, trials=60)
    assert report.passed
    assert [t.trial for t in report.trials if t.negative_q] == [0, 25, 50]
    assert all(1 <= t.n <= 32 and 1 <= t.d <= 16 for t in report.trials)


def test_equivalence_detects_missing_floor():
    report = verify.equivalence_trials(seed=0, trials=2, epsilon=0.0)
    assert not report.passed and report.failures[0].negative_q


def test_relative_error_nan_is_infinite():
    assert verify.relative_error(np.array([np.nan]), np.array([1.0])) == float("inf")
    assert verify.relative_error(np.array([2.0]), np.array([2.0])) == 0.0


def test_registry_covers_required_units():
    names = {u.name for u in verify.units()}
    for v in GateVariant:
        assert f"rgma[{v.value}]" in names
    for block in ("elrf", "ffn", "mib", "cpe"):
        assert any(n.startswith(block) for n in names), block
    assert any("post" in n for n in names)
    assert any(n.startswith("multi_teacher_loss") for n in names)
    assert {u.scope for u in verify.units()} == set(verify.SCOPES)
    with pytest.raises(ValueError):
        verify.units("everything")


@pytest.mark.parametrize("scope", verify.SCOPES)
def test_gradcheck_scope_passes(scope):
    results = verify.run_gradcheck(scope, seeds=(11,))
    bad = [(r.unit, r.error) for r in results if not r.passed]
    assert not bad


def test_gradcheck_deterministic():
    a = verify.run_gradcheck("attention", seeds=(2,))
    b = verify.run_gradcheck("attention", seeds=(2,))
    assert [r.error for r in a] == [r.error for r in b]


def test_kink_free_inputs():
    x = verify.kink_free(np.random.default_rng(0), (1000,))
    assert np.all(np.abs(x) >= verify.KINK_MARGIN)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("REGLA_THREADS", raising=False)
    assert verify.worker_count() == 1
    monkeypatch.setenv("REGLA_THREADS", "3")
    assert verify.worker_count() == 3


def test_threaded_gradcheck_matches_serial(monkeypatch):
    serial = verify.run_gradcheck("primitives", seeds=(0,))
    monkeypatch.setenv("REGLA_THREADS", "4")
    threaded = verify.run_gradcheck("primitives", seeds=(0,))
    assert [(r.unit, r.error) for r in serial] == [(r.unit, r.error) for r in threaded]


def test_support_box():
    r = np.zeros((2, 9, 9))
    assert verify.support_box(r) is None
    r[1, 2, 3] = 1e-30
    r[0, 6, 5] = -1.0
    assert verify.support_box(r) == (2, 6, 3, 5)
