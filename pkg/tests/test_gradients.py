"""Finite-difference verification of analytic gradients (float64).

Small per-group sample for the normal test loop; the acceptance suite runs
the full-coverage version of the same check.
"""
from anovlm.config import load_config

from gradcheck import CHECK_GROUPS, run_gradcheck


def test_central_differences_match_autograd():
    cfg = load_config(None, 0)
    result = run_gradcheck(cfg, per_group=4, step=1e-5, seed=0)
    for group in CHECK_GROUPS:
        assert result["per_group"][group] > 0
    assert result["max_rel"] < 1e-4, result["worst"]
