"""Case parsing, validation, and admittance construction."""

import numpy as np
import pytest

from gridsynth.errors import ParseError, ValidationError
from gridsynth.grid import (
    feature_labels,
    load_bundled_case,
    parse_case_text,
)

TINY = """
# two buses joined by one line
BASE_MVA 100.0

BUS
1  slack  0.0  0.0   0.95 1.05  0.0 0.0
2  pq     0.5  0.2   0.90 1.10  0.0 0.0

GEN
1  0.0 2.0  -1.0 1.0  1.02

BRANCH
1 2  0.01 0.08  0.0  1.0  1.5
"""


def test_parse_tiny_case():
    grid = parse_case_text(TINY, name="tiny")
    assert grid.n == 2
    assert grid.base_mva == 100.0
    assert grid.slack == 0
    assert grid.pq.tolist() == [1]
    assert grid.pv.tolist() == []
    assert grid.pd.tolist() == [0.0, 0.5]
    assert grid.vset[0] == 1.02


def test_comments_and_blank_lines_are_ignored():
    noisy = TINY.replace("BUS\n", "BUS\n# a comment inside a section\n\n")
    assert parse_case_text(noisy).digest() == parse_case_text(TINY).digest()


def test_format_round_trip_is_exact():
    for name in ("case6", "case24"):
        grid = load_bundled_case(name)
        again = parse_case_text(grid.format_case(), name=name)
        assert again.digest() == grid.digest()
        assert np.array_equal(again.ybus.g, grid.ybus.g)
        assert np.array_equal(again.ybus.b, grid.ybus.b)


def test_digest_changes_with_content():
    grid = parse_case_text(TINY)
    other = parse_case_text(TINY.replace("0.5  0.2", "0.6  0.2"))
    assert grid.digest() != other.digest()


def test_bundled_cases_have_expected_shape():
    case6 = load_bundled_case("case6")
    assert case6.n == 6
    assert case6.n_gen == 3
    # bus 4 carries no load, no generation, no shunt
    assert [case6.bus_ids[i] for i in np.flatnonzero(case6.zero_injection_mask)] == [4]

    case24 = load_bundled_case("case24")
    assert case24.n == 24
    zi = [case24.bus_ids[i] for i in np.flatnonzero(case24.zero_injection_mask)]
    assert zi == [11, 12, 17, 24]


def test_unknown_bundled_case():
    with pytest.raises(ValidationError):
        load_bundled_case("case999")


@pytest.mark.parametrize(
    "mutation, exc",
    [
        (("1  slack", "1  king"), ValidationError),  # unknown bus type
        (("BASE_MVA 100.0", ""), ParseError),  # missing base
        (("1 2  0.01 0.08  0.0  1.0  1.5", "1 3  0.01 0.08  0.0  1.0  1.5"), ValidationError),
        (("2  pq", "2  slack"), ValidationError),  # two slacks (bus 2 has no gen anyway)
        (("1  0.0 2.0  -1.0 1.0  1.02", "2  0.0 2.0  -1.0 1.0  1.02"), ValidationError),
        (("0.95 1.05", "1.05 0.95"), ValidationError),  # vmin > vmax
        (("1.0  1.5", "-1.0  1.5"), ValidationError),  # tap <= 0
    ],
)
def test_bad_cases_are_rejected(mutation, exc):
    old, new = mutation
    with pytest.raises(exc):
        parse_case_text(TINY.replace(old, new))


def test_disconnected_network_is_rejected():
    text = TINY.replace(
        "2  pq     0.5  0.2   0.90 1.10  0.0 0.0",
        "2  pq     0.5  0.2   0.90 1.10  0.0 0.0\n3  pq     0.1  0.0   0.90 1.10  0.0 0.0",
    )
    with pytest.raises(ValidationError, match="connected"):
        parse_case_text(text)


def test_multiple_units_aggregate_on_one_bus():
    text = TINY.replace(
        "1  0.0 2.0  -1.0 1.0  1.02",
        "1  0.0 2.0  -1.0 1.0  1.02\n1  0.5 1.0  -0.5 0.5  1.02",
    )
    grid = parse_case_text(text)
    assert grid.n_gen == 1
    g = grid.gens[0]
    assert (g.pmin, g.pmax) == (0.5, 3.0)
    assert (g.qmin, g.qmax) == (-1.5, 1.5)


def test_conflicting_setpoints_on_one_bus():
    text = TINY.replace(
        "1  0.0 2.0  -1.0 1.0  1.02",
        "1  0.0 2.0  -1.0 1.0  1.02\n1  0.5 1.0  -0.5 0.5  1.05",
    )
    with pytest.raises(ValidationError, match="disagree on vset"):
        parse_case_text(text)


def _brute_force_ybus(grid):
    """Accumulate the admittance matrix straight from the branch list."""
    n = grid.n
    y = np.zeros((n, n), dtype=complex)
    for br in grid.branches:
        i = grid.index_of[br.from_bus]
        j = grid.index_of[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b / 2.0
        t = br.tap
        y[i, i] += (ys + bc) / t**2
        y[j, j] += ys + bc
        y[i, j] += -ys / t
        y[j, i] += -ys / t
    for k, bus in enumerate(grid.buses):
        y[k, k] += complex(bus.gs, bus.bs)
    return y


@pytest.mark.parametrize("name", ["case6", "case24"])
def test_ybus_matches_brute_force(name):
    grid = load_bundled_case(name)
    y = _brute_force_ybus(grid)
    np.testing.assert_allclose(grid.ybus.g, y.real, atol=1e-14)
    np.testing.assert_allclose(grid.ybus.b, y.imag, atol=1e-14)


def test_transformer_tap_breaks_symmetry():
    text = TINY.replace("0.01 0.08  0.0  1.0  1.5", "0.01 0.08  0.0  1.05 1.5")
    grid = parse_case_text(text)
    y = grid.ybus.g + 1j * grid.ybus.b
    assert y[0, 1] == pytest.approx(y[1, 0])  # off-diagonals stay equal
    ys = 1.0 / complex(0.01, 0.08)
    assert y[0, 0] == pytest.approx(ys / 1.05**2)
    assert y[1, 1] == pytest.approx(ys)


def test_branch_admittances_match_ybus_terms():
    grid = load_bundled_case("case6")
    adm = grid.branch_adm
    for k, br in enumerate(grid.branches):
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b / 2.0
        assert complex(adm.gff[k], adm.bff[k]) == pytest.approx((ys + bc) / br.tap**2)
        assert complex(adm.gft[k], adm.bft[k]) == pytest.approx(-ys / br.tap)
        assert complex(adm.gtf[k], adm.btf[k]) == pytest.approx(-ys / br.tap)
        assert complex(adm.gtt[k], adm.btt[k]) == pytest.approx(ys + bc)


def test_feature_labels_layout():
    grid = parse_case_text(TINY)
    assert feature_labels(grid) == [
        "P_1",
        "P_2",
        "Q_1",
        "Q_2",
        "V_1",
        "V_2",
        "theta_1",
        "theta_2",
    ]
