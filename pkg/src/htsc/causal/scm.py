"""
Exact discrete structural causal models.

Queries are answered by enumerating the full joint table, which is only
viable for small graphs: at most 8 nodes of cardinality at most 8. The
graph-surgery intervention is the oracle the back-door and front-door
adjustment formulas are checked against.
"""

import logging

from collections import Counter
from typing import Any, Dict, Final, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from ..utils.errors import (
    ConfigError,
    FrontDoorCriterionError,
    NonIdentifiableError,
    UndefinedConditionalError,
)


__all__: Final[List[str]] = [
    "CriterionReport",
    "DiscreteScm",
    "Dist",
    "ObservedDistribution",
    "backdoor_adjust",
    "frontdoor_adjust",
    "observational",
    "random_backdoor_scm",
    "random_frontdoor_scm",
    "random_scm",
    "run_verification",
    "surgery_intervene",
    "verify_frontdoor_criterion",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)

MAX_NODES: Final[int] = 8
MAX_CARD: Final[int] = 8
CPT_TOLERANCE: Final[float] = 1e-12
DIST_TOLERANCE: Final[float] = 1e-9


class Dist:
    """
    Dist class.

    A distribution over the values of a single variable.
    """

    def __init__(
        self,
        support: str,
        probs: Sequence[float],
    ) -> None:
        """
        Initialize the Dist object.

        :param support: The variable name.
        :type support: str
        :param probs: Probabilities indexed by value.
        :type probs: Sequence[float]

        :return: None
        :rtype: None

        :raises ValueError: If probs are negative or do not sum to 1 within 1e-9.
        """

        array: np.ndarray = np.asarray(probs, dtype=np.float64)
        if array.ndim != 1 or np.any(array < 0) or abs(array.sum() - 1.0) > DIST_TOLERANCE:
            raise ValueError(f"not a normalized distribution over {support}: {array}")

        self._support: Final[str] = support
        self._probs: Final[np.ndarray] = array

    def __repr__(self) -> str:
        return f"Dist(support={self._support}, probs={np.array2string(self._probs, precision=6)})"

    def __len__(self) -> int:
        return len(self._probs)

    def __getitem__(self, value: int) -> float:
        return float(self._probs[value])

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    @property
    def support(self) -> str:
        return self._support

    def max_abs_diff(self, other: "Dist") -> float:
        """
        Return the maximum absolute difference to another distribution.
        """

        return float(np.max(np.abs(self._probs - other.probs)))

    def dict(self) -> Dict[str, Any]:
        return {"support": self._support, "probs": self._probs.tolist()}


class _JointSource:
    """
    Shared conditional/marginal logic over a joint table.
    """

    def distribution(self) -> Tuple[List[str], np.ndarray]:
        raise NotImplementedError

    def marginal(
        self,
        keep: Sequence[str],
    ) -> np.ndarray:
        """
        Return the joint over keep, with axes in the order given.

        :raises NonIdentifiableError: If a requested variable is not available.
        """

        variables, table = self.distribution()
        unknown: List[str] = [name for name in keep if name not in variables]
        if unknown:
            raise NonIdentifiableError(f"variables not observed: {', '.join(unknown)}")
        drop: Tuple[int, ...] = tuple(i for i, name in enumerate(variables) if name not in keep)
        reduced: np.ndarray = table.sum(axis=drop) if drop else table
        remaining: List[str] = [name for name in variables if name in keep]
        return np.transpose(reduced, [remaining.index(name) for name in keep])

    def conditional(
        self,
        target: str,
        given: Mapping[str, int],
    ) -> Dist:
        """
        Return P(target | given) by summation over the joint table.

        :raises UndefinedConditionalError: If P(given) is zero.
        """

        names: List[str] = [target] + [name for name in given if name != target]
        table: np.ndarray = self.marginal(names)
        index: Tuple[Any, ...] = (slice(None),) + tuple(given[name] for name in names[1:])
        row: np.ndarray = table[index]
        total: float = float(row.sum())
        if total <= 0.0:
            raise UndefinedConditionalError(f"P({dict(given)}) = 0; P({target} | ...) is undefined")
        return Dist(target, row / total)


class DiscreteScm(_JointSource):
    """
    DiscreteScm class.

    Nodes with finite cardinalities, an acyclic parent structure and one
    conditional probability table per node. A CPT has one row per parent
    assignment (row-major over the parents in declared order) and one
    column per value of the node.
    """

    def __init__(
        self,
        nodes: Sequence[str],
        card: Mapping[str, int],
        parents: Mapping[str, Sequence[str]],
        cpt: Mapping[str, np.ndarray],
        latent: Iterable[str] = (),
    ) -> None:
        """
        Initialize the DiscreteScm object.

        :param nodes: Ordered variable names.
        :type nodes: Sequence[str]
        :param card: Cardinality per node (1..8).
        :type card: Mapping[str, int]
        :param parents: Parent list per node.
        :type parents: Mapping[str, Sequence[str]]
        :param cpt: Table per node, shape [prod(parent cards), card].
        :type cpt: Mapping[str, np.ndarray]
        :param latent: Nodes hidden from observe().
        :type latent: Iterable[str]

        :return: None
        :rtype: None

        :raises ConfigError: If the model violates a structural invariant.
        """

        self._nodes: Final[List[str]] = list(nodes)
        if not 1 <= len(self._nodes) <= MAX_NODES or len(set(self._nodes)) != len(self._nodes):
            raise ConfigError(f"an SCM needs 1..{MAX_NODES} distinct nodes, got {self._nodes}")
        self._card: Final[Dict[str, int]] = {node: int(card[node]) for node in self._nodes}
        self._parents: Final[Dict[str, List[str]]] = {node: list(parents.get(node, ())) for node in self._nodes}
        self._latent: Final[frozenset] = frozenset(latent)

        # Build the DAG
        self._graph: Final[nx.DiGraph] = nx.DiGraph()
        self._graph.add_nodes_from(self._nodes)
        for node, node_parents in self._parents.items():
            for parent in node_parents:
                if parent not in self._card:
                    raise ConfigError(f"unknown parent {parent} of {node}")
                self._graph.add_edge(parent, node)
        if not nx.is_directed_acyclic_graph(self._graph):
            raise ConfigError("parent structure is not acyclic")

        # Validate and store the tables
        self._cpt: Final[Dict[str, np.ndarray]] = {}
        for node in self._nodes:
            if not 1 <= self._card[node] <= MAX_CARD:
                raise ConfigError(f"cardinality of {node} must be in 1..{MAX_CARD}")
            rows: int = int(np.prod([self._card[p] for p in self._parents[node]], dtype=np.int64))
            table: np.ndarray = np.array(cpt[node], dtype=np.float64)
            if table.shape != (rows, self._card[node]):
                raise ConfigError(f"CPT of {node} has shape {table.shape}, expected {(rows, self._card[node])}")
            if np.any(table < 0) or np.any(np.abs(table.sum(axis=1) - 1.0) > CPT_TOLERANCE):
                raise ConfigError(f"CPT rows of {node} must be non-negative and sum to 1")
            table.flags.writeable = False
            self._cpt[node] = table

        # Read counter per node, used to prove which tables a query touches
        self._reads: Final[Counter] = Counter()

    def __repr__(self) -> str:
        edges: str = ", ".join(f"{a}->{b}" for a, b in self._graph.edges)
        return f"DiscreteScm(nodes={self._nodes}, edges=[{edges}], latent={sorted(self._latent)})"

    @property
    def nodes(self) -> List[str]:
        return list(self._nodes)

    @property
    def graph(self) -> nx.DiGraph:
        return self._graph.copy()

    @property
    def latent(self) -> frozenset:
        return self._latent

    @property
    def access_counts(self) -> Dict[str, int]:
        return dict(self._reads)

    def reset_access_counts(self) -> None:
        self._reads.clear()

    def card(self, node: str) -> int:
        return self._card[node]

    def parents(self, node: str) -> List[str]:
        return list(self._parents[node])

    def cpt(self, node: str) -> np.ndarray:
        """
        Return the (read-only) CPT of node and count the access.

        :param node: The node name.
        :type node: str

        :return: The table [prod(parent cards), card].
        :rtype: np.ndarray
        """

        self._reads[node] += 1
        return self._cpt[node]

    def _factor(self, node: str) -> np.ndarray:
        # Reshape the CPT to [card(p1), ..., card(pk), card(node)] and lay it
        # out on the joint axes (node order), size one elsewhere
        index: Dict[str, int] = {name: i for i, name in enumerate(self._nodes)}
        members: List[str] = self._parents[node] + [node]
        factor: np.ndarray = self.cpt(node).reshape([self._card[name] for name in members])
        axes: List[int] = [index[name] for name in members]
        factor = np.transpose(factor, np.argsort(axes))
        shape: List[int] = [1] * len(self._nodes)
        for axis in axes:
            shape[axis] = self._card[self._nodes[axis]]
        return factor.reshape(shape)

    def distribution(self) -> Tuple[List[str], np.ndarray]:
        """
        Return (nodes, joint table) with one axis per node.
        """

        joint: np.ndarray = np.ones([1] * len(self._nodes))
        for node in nx.topological_sort(self._graph):
            joint = joint * self._factor(node)
        return list(self._nodes), np.broadcast_to(joint, [self._card[n] for n in self._nodes]).copy()

    def mutilate(
        self,
        do: Mapping[str, int],
    ) -> "DiscreteScm":
        """
        Return the model with each intervened node replaced by a point mass
        and its incoming edges removed.

        :raises ConfigError: If an intervened node or value is unknown.
        """

        parents: Dict[str, List[str]] = {node: list(p) for node, p in self._parents.items()}
        tables: Dict[str, np.ndarray] = {}
        for node in self._nodes:
            if node in do:
                value: int = int(do[node])
                if not 0 <= value < self._card[node]:
                    raise ConfigError(f"do({node}={value}) outside 0..{self._card[node] - 1}")
                point: np.ndarray = np.zeros((1, self._card[node]))
                point[0, value] = 1.0
                parents[node] = []
                tables[node] = point
            else:
                tables[node] = self.cpt(node)
        unknown: List[str] = [node for node in do if node not in self._card]
        if unknown:
            raise ConfigError(f"cannot intervene on unknown nodes {unknown}")
        return DiscreteScm(self._nodes, self._card, parents, tables, self._latent)

    def observe(
        self,
        latent: Optional[Iterable[str]] = None,
    ) -> "ObservedDistribution":
        """
        Marginalize the latent nodes out of the joint.

        :param latent: Nodes to hide; defaults to the model's latent set.
        :type latent: Optional[Iterable[str]]

        :return: The observational distribution with the full DAG attached.
        :rtype: ObservedDistribution
        """

        hidden: frozenset = self._latent if latent is None else frozenset(latent)
        observed: List[str] = [node for node in self._nodes if node not in hidden]
        table: np.ndarray = self.marginal(observed)
        return ObservedDistribution(observed, {n: self._card[n] for n in observed}, table, self._graph, hidden)


class ObservedDistribution(_JointSource):
    """
    ObservedDistribution class.

    A joint table over the observed variables together with the causal DAG
    (which may mention latent nodes). No conditional probability table of
    any node is reachable from here.
    """

    def __init__(
        self,
        variables: Sequence[str],
        card: Mapping[str, int],
        table: np.ndarray,
        graph: nx.DiGraph,
        latent: Iterable[str] = (),
    ) -> None:
        array: np.ndarray = np.array(table, dtype=np.float64)
        if array.shape != tuple(card[name] for name in variables):
            raise ConfigError(f"table shape {array.shape} does not match variables {list(variables)}")
        if np.any(array < 0) or abs(array.sum() - 1.0) > DIST_TOLERANCE:
            raise ConfigError("observed table must be a normalized joint distribution")
        self._variables: Final[List[str]] = list(variables)
        self._card: Final[Dict[str, int]] = dict(card)
        self._table: Final[np.ndarray] = array
        self._graph: Final[nx.DiGraph] = graph.copy()
        self._latent: Final[frozenset] = frozenset(latent)

    def __repr__(self) -> str:
        return f"ObservedDistribution(variables={self._variables}, latent={sorted(self._latent)})"

    @property
    def graph(self) -> nx.DiGraph:
        return self._graph.copy()

    @property
    def latent(self) -> frozenset:
        return self._latent

    @property
    def variables(self) -> List[str]:
        return list(self._variables)

    def card(self, variable: str) -> int:
        return self._card[variable]

    def distribution(self) -> Tuple[List[str], np.ndarray]:
        return list(self._variables), self._table


Source = Union[DiscreteScm, ObservedDistribution]


def observational(
    source: Source,
    target: str,
    given: Mapping[str, int],
) -> Dist:
    """
    Exact P(target | given) by joint enumeration.

    :param source: A model or an observed distribution.
    :type source: Source
    :param target: The target variable.
    :type target: str
    :param given: Conditioning assignment.
    :type given: Mapping[str, int]

    :return: The conditional distribution.
    :rtype: Dist

    :raises UndefinedConditionalError: If the conditioning event has probability zero.
    """

    return source.conditional(target, given)


def surgery_intervene(
    scm: DiscreteScm,
    do: Mapping[str, int],
    target: str,
) -> Dist:
    """
    P(target | do(...)) by graph surgery and exact marginalization.

    :param scm: The model.
    :type scm: DiscreteScm
    :param do: Intervention assignment.
    :type do: Mapping[str, int]
    :param target: The target variable.
    :type target: str

    :return: The interventional distribution.
    :rtype: Dist
    """

    mutilated: DiscreteScm = scm.mutilate(do)
    return Dist(target, mutilated.marginal([target]))


def backdoor_adjust(
    source: Source,
    treatment: str,
    x: int,
    target: str,
    adjust_set: Sequence[str],
) -> Dist:
    """
    Back-door adjustment: sum_z P(target | treatment=x, Z=z) P(Z=z).

    :param source: A model or an observed distribution.
    :type source: Source
    :param treatment: The treatment variable.
    :type treatment: str
    :param x: The treatment value.
    :type x: int
    :param target: The outcome variable.
    :type target: str
    :param adjust_set: The adjustment variables (must be observed).
    :type adjust_set: Sequence[str]

    :return: The adjusted distribution.
    :rtype: Dist

    :raises NonIdentifiableError: If P(x, z) = 0 for a z with P(z) > 0.
    """

    adjust: List[str] = list(adjust_set)
    joint: np.ndarray = source.marginal([treatment, target] + adjust)
    at_x: np.ndarray = joint[x]
    p_z: np.ndarray = joint.sum(axis=(0, 1))
    p_xz: np.ndarray = at_x.sum(axis=0)
    empty: np.ndarray = (p_z > 0) & (p_xz <= 0)
    if np.any(empty):
        stratum: Tuple[int, ...] = tuple(int(i) for i in np.argwhere(empty)[0])
        raise NonIdentifiableError(
            f"stratum {dict(zip(adjust, stratum))} has P(Z=z) > 0 but P({treatment}={x}, Z=z) = 0"
        )
    with np.errstate(invalid="ignore", divide="ignore"):
        conditional: np.ndarray = np.where(p_xz > 0, at_x / np.where(p_xz > 0, p_xz, 1.0), 0.0)
    probs: np.ndarray = (conditional * p_z).reshape(conditional.shape[0], -1).sum(axis=1)
    return Dist(target, probs)


class CriterionReport:
    """
    CriterionReport class.

    Result of a front-door criterion check with one entry per violation,
    each naming the offending path.
    """

    def __init__(
        self,
        violations: List[str],
    ) -> None:
        self._violations: Final[List[str]] = violations

    def __repr__(self) -> str:
        return f"CriterionReport(ok={self.ok}, violations={self._violations})"

    def __bool__(self) -> bool:
        return self.ok

    @property
    def ok(self) -> bool:
        return not self._violations

    @property
    def violations(self) -> List[str]:
        return list(self._violations)

    def codes(self) -> List[str]:
        """
        Return the violated condition codes, e.g. ["ii", "iii"].
        """

        return sorted({entry.split(")")[0].lstrip("(") for entry in self._violations})


def _render_path(graph: nx.DiGraph, path: Sequence[str]) -> str:
    parts: List[str] = [path[0]]
    for a, b in zip(path, path[1:]):
        parts.append(f"-> {b}" if graph.has_edge(a, b) else f"<- {b}")
    return " ".join(parts)


def _is_open(
    graph: nx.DiGraph,
    path: Sequence[str],
    given: frozenset,
) -> bool:
    for prev, node, nxt in zip(path, path[1:], path[2:]):
        collider: bool = graph.has_edge(prev, node) and graph.has_edge(nxt, node)
        if collider:
            if node not in given and not (nx.descendants(graph, node) & given):
                return False
        elif node in given:
            return False
    return True


def _open_paths(
    graph: nx.DiGraph,
    source: str,
    target: str,
    given: frozenset,
) -> List[List[str]]:
    skeleton: nx.Graph = graph.to_undirected(as_view=True)
    return [path for path in nx.all_simple_paths(skeleton, source, target) if _is_open(graph, path, given)]


def _without_outgoing(graph: nx.DiGraph, node: str) -> nx.DiGraph:
    copy: nx.DiGraph = graph.copy()
    copy.remove_edges_from(list(graph.out_edges(node)))
    return copy


def verify_frontdoor_criterion(
    source: Union[Source, nx.DiGraph],
    x: str,
    mediator: str,
    target: str,
) -> CriterionReport:
    """
    Check the front-door criterion structurally on the DAG.

    (i) the mediator intercepts every directed path from x to target;
    (ii) no back-door path from x to the mediator is open;
    (iii) every back-door path from the mediator to target is blocked by x.

    :param source: A model, an observed distribution or a DAG.
    :type source: Union[Source, nx.DiGraph]
    :param x: The treatment variable.
    :type x: str
    :param mediator: The mediator variable.
    :type mediator: str
    :param target: The outcome variable.
    :type target: str

    :return: The report; truthy when the criterion holds.
    :rtype: CriterionReport

    :raises ConfigError: If a variable is not in the graph.
    """

    graph: nx.DiGraph = source if isinstance(source, nx.DiGraph) else source.graph
    missing: List[str] = [name for name in (x, mediator, target) if name not in graph]
    if missing:
        raise ConfigError(f"variables not in graph: {missing}")
    violations: List[str] = []

    # (i) directed paths that survive removing the mediator
    bypass: nx.DiGraph = graph.copy()
    bypass.remove_node(mediator)
    for path in nx.all_simple_paths(bypass, x, target):
        violations.append(f"(i) directed path {_render_path(graph, path)} bypasses {mediator}")

    # (ii) open back-door paths from x to the mediator
    cut_x: nx.DiGraph = _without_outgoing(graph, x)
    if not nx.is_d_separator(cut_x, {x}, {mediator}, set()):
        for path in _open_paths(cut_x, x, mediator, frozenset()):
            violations.append(f"(ii) back-door path {_render_path(graph, path)} is open")

    # (iii) back-door paths from the mediator to target not blocked by x
    cut_m: nx.DiGraph = _without_outgoing(graph, mediator)
    if not nx.is_d_separator(cut_m, {mediator}, {target}, {x}):
        for path in _open_paths(cut_m, mediator, target, frozenset({x})):
            violations.append(f"(iii) back-door path {_render_path(graph, path)} is open given {x}")

    return CriterionReport(violations)


def frontdoor_adjust(
    source: Source,
    treatment: str,
    x: int,
    mediator: str,
    target: str,
    check: bool = True,
) -> Dist:
    """
    Front-door adjustment from observational quantities only:

        sum_m P(m | x) sum_x' P(x') P(target | x', m)

    A DiscreteScm is first reduced to its observed distribution (latent
    nodes marginalized); the adjustment itself reads the observed joint.
    Strata with P(x', m) = 0 are left out of the inner sum, which is then
    renormalized over the remaining mass of P(x').

    :param source: A model or an observed distribution.
    :type source: Source
    :param treatment: The treatment variable.
    :type treatment: str
    :param x: The treatment value.
    :type x: int
    :param mediator: The mediator variable.
    :type mediator: str
    :param target: The outcome variable.
    :type target: str
    :param check: Verify the criterion first.
    :type check: bool

    :return: The adjusted distribution.
    :rtype: Dist

    :raises FrontDoorCriterionError: If the criterion does not hold.
    :raises UndefinedConditionalError: If P(treatment = x) is zero.
    """

    observed: ObservedDistribution = source.observe() if isinstance(source, DiscreteScm) else source
    if check:
        report: CriterionReport = verify_frontdoor_criterion(observed, treatment, mediator, target)
        if not report.ok:
            raise FrontDoorCriterionError("front-door criterion violated", report.violations)

    joint: np.ndarray = observed.marginal([treatment, mediator, target])
    p_x: np.ndarray = joint.sum(axis=(1, 2))
    if p_x[x] <= 0:
        raise UndefinedConditionalError(f"P({treatment}={x}) = 0")
    p_m_given_x: np.ndarray = joint[x].sum(axis=1) / p_x[x]
    p_xm: np.ndarray = joint.sum(axis=2)

    probs: np.ndarray = np.zeros(joint.shape[2])
    for m, weight in enumerate(p_m_given_x):
        if weight <= 0:
            continue
        support: np.ndarray = p_xm[:, m] > 0
        mass: float = float(p_x[support].sum())
        if not support.all():
            logger.warning(
                "front-door stratum %s=%d: P(%s, %s=%d) = 0 for %d treatment value(s); renormalizing",
                mediator,
                m,
                treatment,
                mediator,
                m,
                int((~support).sum()),
            )
        inner: np.ndarray = np.zeros(joint.shape[2])
        for x_hat in np.flatnonzero(support):
            inner += p_x[x_hat] * joint[x_hat, m] / p_xm[x_hat, m]
        probs += weight * inner / mass
    return Dist(target, probs)


def _dirichlet_table(rng: np.random.Generator, rows: int, card: int) -> np.ndarray:
    # Symmetric Dirichlet(1) rows, renormalized to absorb rounding
    table: np.ndarray = rng.dirichlet(np.ones(card), size=rows)
    return table / table.sum(axis=1, keepdims=True)


def _random_tables(
    rng: np.random.Generator,
    nodes: Sequence[str],
    card: Mapping[str, int],
    parents: Mapping[str, Sequence[str]],
) -> Dict[str, np.ndarray]:
    return {
        node: _dirichlet_table(rng, int(np.prod([card[p] for p in parents[node]], dtype=np.int64)), card[node])
        for node in nodes
    }


def random_scm(
    rng: np.random.Generator,
    n_nodes: int = 4,
    max_card: int = 3,
    edge_prob: float = 0.5,
) -> DiscreteScm:
    """
    Random DAG over V0..V{n-1} (edges only from lower to higher index) with
    Dirichlet(1) CPT rows.
    """

    if not 1 <= n_nodes <= MAX_NODES or not 1 <= max_card <= MAX_CARD:
        raise ConfigError("random_scm size out of range")
    nodes: List[str] = [f"V{i}" for i in range(n_nodes)]
    card: Dict[str, int] = {node: int(rng.integers(2, max_card + 1)) if max_card > 1 else 1 for node in nodes}
    parents: Dict[str, List[str]] = {
        node: [nodes[j] for j in range(i) if rng.random() < edge_prob] for i, node in enumerate(nodes)
    }
    return DiscreteScm(nodes, card, parents, _random_tables(rng, nodes, card, parents))


def random_frontdoor_scm(
    rng: np.random.Generator,
    max_card: int = 2,
    confounder_card: Optional[int] = None,
) -> DiscreteScm:
    """
    Canonical front-door model Z -> X -> M -> Y, Z -> Y with Z latent.

    :param rng: The generator.
    :type rng: np.random.Generator
    :param max_card: Cardinalities are drawn from 2..max_card (2 = binary).
    :type max_card: int
    :param confounder_card: Fixed cardinality of Z (1 removes confounding).
    :type confounder_card: Optional[int]

    :return: The model.
    :rtype: DiscreteScm
    """

    nodes: List[str] = ["Z", "X", "M", "Y"]
    card: Dict[str, int] = {node: int(rng.integers(2, max_card + 1)) for node in nodes}
    if confounder_card is not None:
        card["Z"] = confounder_card
    parents: Dict[str, List[str]] = {"Z": [], "X": ["Z"], "M": ["X"], "Y": ["Z", "M"]}
    return DiscreteScm(nodes, card, parents, _random_tables(rng, nodes, card, parents), latent={"Z"})


def random_backdoor_scm(
    rng: np.random.Generator,
    max_card: int = 2,
) -> DiscreteScm:
    """
    Confounded model X <- Z -> Y, X -> Y with Z observed.
    """

    nodes: List[str] = ["Z", "X", "Y"]
    card: Dict[str, int] = {node: int(rng.integers(2, max_card + 1)) for node in nodes}
    parents: Dict[str, List[str]] = {"Z": [], "X": ["Z"], "Y": ["Z", "X"]}
    return DiscreteScm(nodes, card, parents, _random_tables(rng, nodes, card, parents))


def run_verification(
    trials: int,
    seed: int,
    max_card: int = 3,
    tolerance: float = 1e-10,
) -> Dict[str, Any]:
    """
    Compare front-door and back-door adjustment with graph surgery on
    seeded random models.

    :param trials: Number of random models of each kind.
    :type trials: int
    :param seed: Root seed.
    :type seed: int
    :param max_card: Largest cardinality drawn.
    :type max_card: int
    :param tolerance: Maximum accepted absolute error.
    :type tolerance: float

    :return: Summary {trials, max_abs_error, failures, ...}.
    :rtype: Dict[str, Any]
    """

    rng: np.random.Generator = np.random.default_rng(seed)
    front_worst: float = 0.0
    back_worst: float = 0.0
    failures: List[Dict[str, Any]] = []
    confounder_reads: int = 0

    for trial in range(trials):
        front: DiscreteScm = random_frontdoor_scm(rng, max_card=max_card)
        # Z reads from marginalizing it away; the adjustment must add none
        front.reset_access_counts()
        front.observe()
        baseline: int = front.access_counts.get("Z", 0)
        for x in range(front.card("X")):
            front.reset_access_counts()
            adjusted: Dist = frontdoor_adjust(front, "X", x, "M", "Y")
            confounder_reads += front.access_counts.get("Z", 0) - baseline
            truth: Dist = surgery_intervene(front, {"X": x}, "Y")
            error: float = adjusted.max_abs_diff(truth)
            front_worst = max(front_worst, error)
            if error > tolerance:
                failures.append({"trial": trial, "kind": "frontdoor", "x": x, "error": error})

        back: DiscreteScm = random_backdoor_scm(rng, max_card=max_card)
        for x in range(back.card("X")):
            error = backdoor_adjust(back, "X", x, "Y", ["Z"]).max_abs_diff(surgery_intervene(back, {"X": x}, "Y"))
            back_worst = max(back_worst, error)
            if error > tolerance:
                failures.append({"trial": trial, "kind": "backdoor", "x": x, "error": error})

    summary: Dict[str, Any] = {
        "trials": trials,
        "max_abs_error": max(front_worst, back_worst),
        "frontdoor_max_abs_error": front_worst,
        "backdoor_max_abs_error": back_worst,
        "confounder_cpt_reads": confounder_reads,
        "failures": failures,
    }
    logger.info("scm verification: %d trials, max abs error %.3e, %d failures", trials, summary["max_abs_error"], len(failures))
    return summary
