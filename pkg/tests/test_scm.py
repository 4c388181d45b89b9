import itertools

from typing import Dict, List

import networkx as nx
import numpy as np
import pytest

from htsc.causal.scm import (
    DiscreteScm,
    Dist,
    backdoor_adjust,
    frontdoor_adjust,
    observational,
    random_backdoor_scm,
    random_frontdoor_scm,
    random_scm,
    run_verification,
    surgery_intervene,
    verify_frontdoor_criterion,
)
from htsc.utils.errors import (
    ConfigError,
    FrontDoorCriterionError,
    NonIdentifiableError,
    UndefinedConditionalError,
)


def enumerate_joint(scm: DiscreteScm) -> Dict[tuple, float]:
    # Product of CPT entries, one assignment at a time
    joint: Dict[tuple, float] = {}
    nodes: List[str] = scm.nodes
    for values in itertools.product(*[range(scm.card(node)) for node in nodes]):
        assignment = dict(zip(nodes, values))
        p = 1.0
        for node in nodes:
            parents = scm.parents(node)
            row = 0
            if parents:
                row = int(np.ravel_multi_index([assignment[q] for q in parents], [scm.card(q) for q in parents]))
            p *= scm.cpt(node)[row, assignment[node]]
        joint[values] = p
    return joint


def chain(y_rows: List[List[float]]) -> DiscreteScm:
    return DiscreteScm(
        ["X", "Y"],
        {"X": 2, "Y": 2},
        {"Y": ["X"]},
        {"X": np.array([[0.4, 0.6]]), "Y": np.array(y_rows)},
    )


FRONTDOOR_GRAPH = nx.DiGraph([("Z", "X"), ("X", "M"), ("M", "Y"), ("Z", "Y")])


def test_observational_reads_an_independent_cpt() -> None:
    dist = observational(chain([[0.3, 0.7], [0.3, 0.7]]), "Y", {"X": 0})
    assert np.allclose(dist.probs, [0.3, 0.7], atol=1e-12)


def test_deterministic_chain_gives_a_point_mass() -> None:
    scm = DiscreteScm(
        ["X", "M", "Y"],
        {"X": 2, "M": 2, "Y": 2},
        {"M": ["X"], "Y": ["M"]},
        {"X": [[0.5, 0.5]], "M": [[1.0, 0.0], [0.0, 1.0]], "Y": [[1.0, 0.0], [0.0, 1.0]]},
    )
    assert observational(scm, "Y", {"X": 1}).probs.tolist() == [0.0, 1.0]


@pytest.mark.parametrize("seed", range(10))
def test_observational_matches_joint_enumeration(seed: int) -> None:
    scm = random_scm(np.random.default_rng(seed), n_nodes=4, max_card=3)
    joint = enumerate_joint(scm)
    expected = np.zeros(scm.card("V3"))
    for values, p in joint.items():
        if values[0] == 0 and values[1] == 1:
            expected[values[3]] += p
    expected /= expected.sum()
    dist = observational(scm, "V3", {"V0": 0, "V1": 1})
    assert np.max(np.abs(dist.probs - expected)) <= 1e-12


def test_zero_probability_condition_is_undefined() -> None:
    scm = DiscreteScm(
        ["X", "Y"],
        {"X": 2, "Y": 2},
        {"Y": ["X"]},
        {"X": [[1.0, 0.0]], "Y": [[0.5, 0.5], [0.2, 0.8]]},
    )
    with pytest.raises(UndefinedConditionalError):
        observational(scm, "Y", {"X": 1})


@pytest.mark.parametrize("seed", range(10))
def test_surgery_without_confounder_equals_conditioning(seed: int) -> None:
    rng = np.random.default_rng(seed)
    scm = DiscreteScm(
        ["X", "M", "Y"],
        {"X": 3, "M": 2, "Y": 3},
        {"M": ["X"], "Y": ["X", "M"]},
        {
            "X": rng.dirichlet(np.ones(3), size=1),
            "M": rng.dirichlet(np.ones(2), size=3),
            "Y": rng.dirichlet(np.ones(3), size=6),
        },
    )
    for x in range(3):
        assert surgery_intervene(scm, {"X": x}, "Y").max_abs_diff(observational(scm, "Y", {"X": x})) <= 1e-12


def test_surgery_on_irrelevant_node_gives_the_marginal() -> None:
    rng = np.random.default_rng(3)
    scm = DiscreteScm(
        ["Z", "X", "Y"],
        {"Z": 2, "X": 2, "Y": 3},
        {"X": ["Z"], "Y": ["Z"]},
        {"Z": rng.dirichlet(np.ones(2), size=1), "X": rng.dirichlet(np.ones(2), size=2), "Y": rng.dirichlet(np.ones(3), size=2)},
    )
    marginal = scm.marginal(["Y"])
    for x in range(2):
        assert np.max(np.abs(surgery_intervene(scm, {"X": x}, "Y").probs - marginal)) <= 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_surgery_matches_mutilated_enumeration(seed: int) -> None:
    scm = random_scm(np.random.default_rng(100 + seed), n_nodes=4, max_card=3)
    joint = enumerate_joint(scm.mutilate({"V1": 0}))
    expected = np.zeros(scm.card("V3"))
    for values, p in joint.items():
        expected[values[3]] += p
    assert np.max(np.abs(surgery_intervene(scm, {"V1": 0}, "V3").probs - expected)) <= 1e-12


def test_backdoor_over_an_independent_variable_is_vacuous() -> None:
    rng = np.random.default_rng(5)
    scm = DiscreteScm(
        ["Z", "X", "Y"],
        {"Z": 3, "X": 2, "Y": 2},
        {"Y": ["X"]},
        {"Z": rng.dirichlet(np.ones(3), size=1), "X": rng.dirichlet(np.ones(2), size=1), "Y": rng.dirichlet(np.ones(2), size=2)},
    )
    for x in range(2):
        expected = observational(scm, "Y", {"X": x})
        assert backdoor_adjust(scm, "X", x, "Y", ["Z"]).max_abs_diff(expected) <= 1e-12
        assert backdoor_adjust(scm, "X", x, "Y", []).max_abs_diff(expected) <= 1e-12


@pytest.mark.parametrize("seed", range(200))
def test_backdoor_matches_surgery(seed: int) -> None:
    scm = random_backdoor_scm(np.random.default_rng(seed))
    for x in range(scm.card("X")):
        assert backdoor_adjust(scm, "X", x, "Y", ["Z"]).max_abs_diff(surgery_intervene(scm, {"X": x}, "Y")) <= 1e-10


def test_backdoor_reports_empty_stratum() -> None:
    scm = DiscreteScm(
        ["Z", "X", "Y"],
        {"Z": 2, "X": 2, "Y": 2},
        {"X": ["Z"], "Y": ["Z", "X"]},
        {
            "Z": [[0.5, 0.5]],
            "X": [[1.0, 0.0], [0.0, 1.0]],
            "Y": [[0.9, 0.1], [0.6, 0.4], [0.3, 0.7], [0.2, 0.8]],
        },
    )
    with pytest.raises(NonIdentifiableError, match="stratum"):
        backdoor_adjust(scm, "X", 0, "Y", ["Z"])


@pytest.mark.parametrize("seed", range(200))
def test_frontdoor_matches_surgery_without_reading_the_confounder(seed: int) -> None:
    scm = random_frontdoor_scm(np.random.default_rng(seed), max_card=3)
    observed = scm.observe()
    assert "Z" not in observed.variables
    for x in range(scm.card("X")):
        scm.reset_access_counts()
        adjusted = frontdoor_adjust(observed, "X", x, "M", "Y")
        assert scm.access_counts.get("Z", 0) == 0
        assert adjusted.max_abs_diff(surgery_intervene(scm, {"X": x}, "Y")) <= 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_frontdoor_on_the_model_reads_the_confounder_only_to_marginalize_it(seed: int) -> None:
    scm = random_frontdoor_scm(np.random.default_rng(500 + seed), max_card=3)
    scm.reset_access_counts()
    scm.observe()
    baseline = scm.access_counts["Z"]
    assert baseline > 0
    for x in range(scm.card("X")):
        scm.reset_access_counts()
        adjusted = frontdoor_adjust(scm, "X", x, "M", "Y")
        assert scm.access_counts["Z"] == baseline
        assert adjusted.max_abs_diff(surgery_intervene(scm, {"X": x}, "Y")) <= 1e-10
    scm.reset_access_counts()
    surgery_intervene(scm, {"X": 0}, "Y")
    assert scm.access_counts["Z"] > 0


def test_frontdoor_without_confounding_equals_conditioning() -> None:
    scm = random_frontdoor_scm(np.random.default_rng(11), confounder_card=1)
    for x in range(scm.card("X")):
        assert frontdoor_adjust(scm, "X", x, "M", "Y").max_abs_diff(observational(scm, "Y", {"X": x})) <= 1e-12


def test_frontdoor_collapses_onto_a_copied_mediator() -> None:
    # M copies X and Y depends on M alone; rows are ordered (z, m)
    y_by_m = [[0.8, 0.2], [0.1, 0.9]]
    scm = DiscreteScm(
        ["Z", "X", "M", "Y"],
        {"Z": 2, "X": 2, "M": 2, "Y": 2},
        {"X": ["Z"], "M": ["X"], "Y": ["Z", "M"]},
        {
            "Z": [[0.3, 0.7]],
            "X": [[0.6, 0.4], [0.25, 0.75]],
            "M": [[1.0, 0.0], [0.0, 1.0]],
            "Y": y_by_m + y_by_m,
        },
        latent={"Z"},
    )
    dist = frontdoor_adjust(scm, "X", 1, "M", "Y")
    assert np.allclose(dist.probs, [0.1, 0.9], atol=1e-12)
    assert dist.max_abs_diff(observational(scm, "Y", {"M": 1})) <= 1e-12


def test_criterion_holds_on_the_textbook_graph() -> None:
    report = verify_frontdoor_criterion(FRONTDOOR_GRAPH, "X", "M", "Y")
    assert report.ok
    assert bool(report)
    assert report.codes() == []


def test_confounded_mediator_violates_condition_ii() -> None:
    graph = FRONTDOOR_GRAPH.copy()
    graph.add_edge("Z", "M")
    report = verify_frontdoor_criterion(graph, "X", "M", "Y")
    assert not report.ok
    assert "ii" in report.codes()
    assert any("Z" in entry for entry in report.violations)


def test_direct_edge_violates_condition_i() -> None:
    graph = FRONTDOOR_GRAPH.copy()
    graph.add_edge("X", "Y")
    report = verify_frontdoor_criterion(graph, "X", "M", "Y")
    assert report.codes() == ["i"]
    assert "X -> Y" in report.violations[0]


def test_frontdoor_refuses_a_violating_model() -> None:
    rng = np.random.default_rng(2)
    scm = DiscreteScm(
        ["Z", "X", "M", "Y"],
        {"Z": 2, "X": 2, "M": 2, "Y": 2},
        {"X": ["Z"], "M": ["X"], "Y": ["Z", "M", "X"]},
        {
            "Z": rng.dirichlet(np.ones(2), size=1),
            "X": rng.dirichlet(np.ones(2), size=2),
            "M": rng.dirichlet(np.ones(2), size=2),
            "Y": rng.dirichlet(np.ones(2), size=8),
        },
        latent={"Z"},
    )
    with pytest.raises(FrontDoorCriterionError) as info:
        frontdoor_adjust(scm, "X", 0, "M", "Y")
    assert info.value.violations


def test_criterion_needs_known_variables() -> None:
    with pytest.raises(ConfigError):
        verify_frontdoor_criterion(FRONTDOOR_GRAPH, "X", "W", "Y")


def test_model_validation() -> None:
    with pytest.raises(ConfigError, match="acyclic"):
        DiscreteScm(["A", "B"], {"A": 2, "B": 2}, {"A": ["B"], "B": ["A"]}, {"A": [[1, 0], [0, 1]], "B": [[1, 0], [0, 1]]})
    with pytest.raises(ConfigError, match="sum to 1"):
        DiscreteScm(["A"], {"A": 2}, {}, {"A": [[0.5, 0.6]]})
    with pytest.raises(ValueError):
        Dist("A", [0.5, 0.6])


def test_run_verification_summary() -> None:
    summary = run_verification(20, seed=0)
    assert summary["trials"] == 20
    assert summary["failures"] == []
    assert summary["confounder_cpt_reads"] == 0
    assert summary["max_abs_error"] <= 1e-10
