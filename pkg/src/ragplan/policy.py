"""Include/exclude traversal policy over the instruction graph.

The policy is a two-layer network (20 tanh units, 2-way softmax) acting
on a three-component state: the best instruction similarity at the
visited node, the best task-centroid similarity on the incoming edge,
and the best question similarity within that task. Depth-first
traversal from the most query-similar nodes emits up to K candidate
instruction paths; training is warm-start binary cross-entropy followed
by episodic policy gradients on the end-to-end answer score.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .corpus import InstructionPath, TaskCorpus
from .embedding import cosine, embed_text
from .errors import ConfigError, DataError, MalformedFileError, NotFoundError
from .graph import EdgeSet, InstructionGraph, edge_task_centroids
from .optim import AdamState, ReturnBaseline, adam_step
from .serialize import floats_to_hex, hex_to_floats, read_versioned, write_versioned

HIDDEN_UNITS = 20
STATE_SIZE = 3
PROB_FLOOR = 1e-7
POLICY_KIND = "policy-params"

INCLUDE = 1
EXCLUDE = 0


def _rule_no_lookup_before_search(candidate: str, path_so_far: list[str]) -> bool:
    """Disallow a lookup-style step before any search-style step."""
    operator = candidate.split("[", 1)[0].strip().lower()
    if operator != "lookup":
        return True
    return any(text.split("[", 1)[0].strip().lower() == "search" for text in path_so_far)


RULE_HOOKS = {
    "no-lookup-before-search": _rule_no_lookup_before_search,
}


@dataclass(frozen=True)
class RlConfig:
    learning_rate: float = 0.001
    gamma: float = 0.99
    k: int = 3
    max_path_len: int = 16
    max_nodes_visited: int = 256
    rule_hooks: tuple[str, ...] = ()
    use_baseline: bool = True
    baseline_window: int = 64

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"K must be >= 1, got {self.k}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}")
        for name in self.rule_hooks:
            if name not in RULE_HOOKS:
                raise ConfigError(f"unknown rule hook {name!r}")


@dataclass
class PolicyParams:
    w1: np.ndarray  # (20, 3)
    b1: np.ndarray  # (20,)
    w2: np.ndarray  # (2, 20)
    b2: np.ndarray  # (2,)

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            [self.w1.ravel(), self.b1.ravel(), self.w2.ravel(), self.b2.ravel()]
        )

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "PolicyParams":
        sizes = [HIDDEN_UNITS * STATE_SIZE, HIDDEN_UNITS, 2 * HIDDEN_UNITS, 2]
        if vector.size != sum(sizes):
            raise ConfigError(f"policy vector has {vector.size} entries, expected {sum(sizes)}")
        chunks = np.split(vector.astype(np.float64), np.cumsum(sizes)[:-1])
        return cls(
            w1=chunks[0].reshape(HIDDEN_UNITS, STATE_SIZE),
            b1=chunks[1].copy(),
            w2=chunks[2].reshape(2, HIDDEN_UNITS),
            b2=chunks[3].copy(),
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def init_policy_params(seed: int = 0, scale: float = 0.1) -> PolicyParams:
    rng = np.random.default_rng(seed)
    return PolicyParams(
        w1=scale * rng.standard_normal((HIDDEN_UNITS, STATE_SIZE)),
        b1=np.zeros(HIDDEN_UNITS),
        w2=scale * rng.standard_normal((2, HIDDEN_UNITS)),
        b2=np.zeros(2),
    )


@dataclass(frozen=True)
class EpisodeStep:
    state: np.ndarray  # (3,)
    action: int
    log_prob: float
    forced: bool = False


@dataclass
class Episode:
    steps: list[EpisodeStep] = field(default_factory=list)
    reward: float = 0.0


@dataclass(frozen=True)
class Candidate:
    path: InstructionPath
    episode: Episode
    node_sequence: tuple[int, ...]


def build_state(
    graph: InstructionGraph,
    query: "np.ndarray | object",
    node_id: int,
    in_edge: EdgeSet | None,
) -> np.ndarray:
    """Three similarities: best instruction, best task centroid, best
    question within the best task. Without an incoming edge the last two
    components are zero."""
    if node_id not in graph.nodes:
        raise NotFoundError(f"node {node_id} not in graph")
    node = graph.nodes[node_id]
    instruction_sim = max(
        (cosine(query, entry.embedding) for entry in node.instructions.values()),
        default=0.0,
    )
    task_sim = 0.0
    question_sim = 0.0
    if in_edge is not None:
        best_task = None
        for task_id, centroid, vectors in edge_task_centroids(graph, in_edge):
            sim = cosine(query, centroid)
            if best_task is None or sim > task_sim:
                best_task = (task_id, vectors)
                task_sim = sim
        if best_task is not None:
            question_sim = max(cosine(query, vec) for vec in best_task[1])
    return np.array([instruction_sim, task_sim, question_sim], dtype=np.float64)


def _forward_parts(params: PolicyParams, state: np.ndarray):
    hidden = np.tanh(params.w1 @ state + params.b1)
    logits = params.w2 @ hidden + params.b2
    shifted = logits - logits.max()
    probs = np.exp(shifted)
    probs /= probs.sum()
    return hidden, probs


def policy_forward(params: PolicyParams, state: np.ndarray) -> tuple[float, float]:
    """(p_include, p_exclude) for a state; always a proper distribution."""
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(params.to_vector())) or not np.all(np.isfinite(state)):
        raise DataError("policy_forward over non-finite inputs")
    _, probs = _forward_parts(params, state)
    return float(probs[0]), float(probs[1])


def _grad_from_logit_deltas(
    params: PolicyParams, states: np.ndarray, logit_deltas: np.ndarray
) -> np.ndarray:
    """Backpropagate a batch of dL/dlogits rows into a flat gradient."""
    g_w1 = np.zeros_like(params.w1)
    g_b1 = np.zeros_like(params.b1)
    g_w2 = np.zeros_like(params.w2)
    g_b2 = np.zeros_like(params.b2)
    for state, d_logits in zip(states, logit_deltas):
        hidden = np.tanh(params.w1 @ state + params.b1)
        g_w2 += np.outer(d_logits, hidden)
        g_b2 += d_logits
        d_hidden = params.w2.T @ d_logits
        d_pre = d_hidden * (1.0 - hidden * hidden)
        g_w1 += np.outer(d_pre, state)
        g_b1 += d_pre
    return PolicyParams(g_w1, g_b1, g_w2, g_b2).to_vector()


def bce_loss_and_grad(
    params: PolicyParams, states: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on p_include, with its analytic gradient."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if states.shape[0] != labels.size:
        raise DataError("state/label count mismatch")
    count = labels.size
    losses = []
    deltas = np.zeros((count, 2))
    for idx, (state, label) in enumerate(zip(states, labels)):
        _, probs = _forward_parts(params, state)
        p_include = float(np.clip(probs[0], PROB_FLOOR, 1.0 - PROB_FLOOR))
        losses.append(-(label * np.log(p_include) + (1.0 - label) * np.log(1.0 - p_include)))
        target = np.array([label, 1.0 - label])
        deltas[idx] = (probs - target) / count
    grad = _grad_from_logit_deltas(params, states, deltas)
    return float(np.mean(losses)), grad


def warmstart_step(
    params: PolicyParams,
    batch: list[tuple[np.ndarray, int]],
    learning_rate: float,
    opt: AdamState | None = None,
) -> tuple[PolicyParams, float, AdamState]:
    """One Adam step on the warm-start BCE over a labeled state batch."""
    if not batch:
        raise DataError("warmstart_step over an empty batch")
    states = np.stack([np.asarray(s, dtype=np.float64) for s, _ in batch])
    labels = np.array([y for _, y in batch], dtype=np.float64)
    loss, grad = bce_loss_and_grad(params, states, labels)
    vector = params.to_vector()
    if opt is None:
        opt = AdamState.zeros(vector.size)
    updated = adam_step(vector, grad, opt, learning_rate)
    return PolicyParams.from_vector(updated), loss, opt


def episode_returns(episode: Episode, gamma: float) -> np.ndarray:
    """Terminal reward discounted backward: G_t = gamma^(T-1-t) * r."""
    horizon = len(episode.steps)
    return np.array(
        [episode.reward * gamma ** (horizon - 1 - t) for t in range(horizon)], dtype=np.float64
    )


def pg_loss_and_grad(
    params: PolicyParams, episode: Episode, gamma: float, baseline_value: float = 0.0
) -> tuple[float, np.ndarray]:
    """REINFORCE loss sum(-G_t * log pi(a_t | s_t)) and its gradient.

    Steps whose action was forced by a rule hook carry no gradient.
    """
    if not episode.steps:
        raise DataError("pg update over an empty episode")
    returns = episode_returns(episode, gamma) - baseline_value
    states = np.stack([step.state for step in episode.steps])
    deltas = np.zeros((len(episode.steps), 2))
    loss = 0.0
    for idx, (step, weight) in enumerate(zip(episode.steps, returns)):
        if step.forced:
            continue
        _, probs = _forward_parts(params, step.state)
        # softmax output order is (include, exclude)
        prob_index = 0 if step.action == INCLUDE else 1
        action_prob = float(np.clip(probs[prob_index], PROB_FLOOR, 1.0))
        loss += -weight * np.log(action_prob)
        onehot = np.zeros(2)
        onehot[prob_index] = 1.0
        deltas[idx] = weight * (probs - onehot)
    grad = _grad_from_logit_deltas(params, states, deltas)
    return float(loss), grad


def pg_update(
    params: PolicyParams,
    episode: Episode,
    config: RlConfig,
    opt: AdamState | None = None,
    baseline: ReturnBaseline | None = None,
) -> tuple[PolicyParams, AdamState]:
    """One Adam step on the REINFORCE loss for one episode."""
    baseline_value = 0.0
    if config.use_baseline and baseline is not None:
        baseline_value = baseline.value()
    _, grad = pg_loss_and_grad(params, episode, config.gamma, baseline_value)
    if baseline is not None:
        for value in episode_returns(episode, config.gamma):
            baseline.update(float(value))
    vector = params.to_vector()
    if opt is None:
        opt = AdamState.zeros(vector.size)
    updated = adam_step(vector, grad, opt, config.learning_rate)
    return PolicyParams.from_vector(updated), opt


def _start_nodes(graph: InstructionGraph, query, k: int) -> list[int]:
    """Nodes of the k most query-similar instructions, most similar first."""
    scored = []
    for node_id, node in sorted(graph.nodes.items()):
        for text in sorted(node.instructions):
            sim = cosine(query, node.instructions[text].embedding)
            scored.append((-sim, node_id, text))
    scored.sort()
    starts: list[int] = []
    for _, node_id, _ in scored:
        if node_id not in starts:
            starts.append(node_id)
        if len(starts) == k:
            break
    return starts


def _edge_score(graph: InstructionGraph, edge: EdgeSet, query) -> float:
    scores = [
        cosine(query, centroid) for _, centroid, _ in edge_task_centroids(graph, edge)
    ]
    return max(scores, default=0.0)


def _node_affinity(graph: InstructionGraph, node_id: int, query) -> float:
    node = graph.nodes[node_id]
    return max(cosine(query, entry.embedding) for entry in node.instructions.values())


def _best_instruction(graph: InstructionGraph, node_id: int, query) -> str:
    node = graph.nodes[node_id]
    return min(
        node.instructions,
        key=lambda text: (-cosine(query, node.instructions[text].embedding), text),
    )


def traverse(
    graph: InstructionGraph,
    query_text: str,
    params: PolicyParams,
    config: RlConfig,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
    task_id: str = "",
    question_id: str = "",
) -> list[Candidate]:
    """Depth-first candidate retrieval.

    Starting from the K most query-similar nodes, the policy acts at each
    visited node: include appends the node's most query-similar
    instruction and descends into out-neighbors ordered by edge task
    similarity; exclude, a dead end, or the length cap emits the current
    path and backtracks. Traversal stops after K paths or once the node
    visit budget is spent.
    """
    if graph.is_empty():
        raise NotFoundError("cannot traverse an empty graph")
    if mode not in ("greedy", "sample"):
        raise ConfigError(f"unknown traversal mode {mode!r}")
    if mode == "sample" and rng is None:
        rng = np.random.default_rng(0)
    query = embed_text(query_text, graph.embedder)
    hooks = [RULE_HOOKS[name] for name in config.rule_hooks]
    budget = {"left": config.max_nodes_visited}

    def start_walks(start: int):
        """Depth-first candidate generator rooted at one start node."""
        path_texts: list[str] = []
        node_stack: list[int] = []
        step_stack: list[EpisodeStep] = []
        # Directed edges already on the current branch; a walk may revisit
        # a node through a different edge but never re-traverse the same
        # edge, which rules out degenerate ping-pong cycles.
        edges_on_branch: set[tuple[int, int]] = set()

        def snapshot() -> Candidate:
            return Candidate(
                path=InstructionPath(tuple(path_texts), task_id, question_id, 0.0),
                episode=Episode(steps=list(step_stack)),
                node_sequence=tuple(node_stack),
            )

        def visit(node_id: int, in_edge: EdgeSet | None):
            if budget["left"] <= 0:
                return
            budget["left"] -= 1
            state = build_state(graph, query, node_id, in_edge)
            best_text = _best_instruction(graph, node_id, query)
            forced = any(not hook(best_text, path_texts) for hook in hooks)
            if forced:
                action, log_prob = EXCLUDE, 0.0
            else:
                p_include, p_exclude = policy_forward(params, state)
                if mode == "greedy":
                    action = INCLUDE if p_include >= p_exclude else EXCLUDE
                else:
                    action = INCLUDE if rng.random() < p_include else EXCLUDE
                log_prob = float(
                    np.log(max(p_include if action == INCLUDE else p_exclude, PROB_FLOOR))
                )
            step_stack.append(
                EpisodeStep(state=state, action=action, log_prob=log_prob, forced=forced)
            )
            if action == EXCLUDE:
                if path_texts:
                    yield snapshot()
                step_stack.pop()
                return
            path_texts.append(best_text)
            node_stack.append(node_id)
            neighbors = [
                edge
                for edge in graph.out_edges(node_id)
                if (edge.from_node, edge.to_node) not in edges_on_branch
            ]
            # Primary key: how well the child's instructions match the
            # query; edge task similarity breaks ties. Terminal helper
            # nodes aggregate every task and would otherwise outrank the
            # branch that actually mentions the queried entities.
            neighbors.sort(
                key=lambda edge: (
                    -_node_affinity(graph, edge.to_node, query),
                    -_edge_score(graph, edge, query),
                    edge.to_node,
                )
            )
            if len(path_texts) >= config.max_path_len or not neighbors:
                yield snapshot()
            else:
                yielded = False
                for edge in neighbors:
                    if budget["left"] <= 0:
                        break
                    key = (edge.from_node, edge.to_node)
                    edges_on_branch.add(key)
                    for candidate in visit(edge.to_node, edge):
                        yielded = True
                        yield candidate
                    edges_on_branch.discard(key)
                if not yielded:
                    # every branch was cut off by the visit budget
                    yield snapshot()
            path_texts.pop()
            node_stack.pop()
            step_stack.pop()

        yield from visit(start, None)

    # Fair collection: each start contributes in rotation, so one deep
    # subtree cannot consume the whole candidate budget.
    candidates: list[Candidate] = []
    seen_sequences: set[tuple[str, ...]] = set()
    walkers = [start_walks(start) for start in _start_nodes(graph, query, config.k)]
    active = deque(walkers)
    while active and len(candidates) < config.k and budget["left"] >= 0:
        walker = active.popleft()
        try:
            candidate = next(walker)
        except StopIteration:
            continue
        active.append(walker)
        key = candidate.path.instructions
        if key in seen_sequences:
            continue
        seen_sequences.add(key)
        candidates.append(candidate)
    return candidates


@dataclass(frozen=True)
class WarmstartExample:
    state: np.ndarray
    label: int
    node_id: int
    task_id: str
    question_id: str


def _path_node_sequence(graph: InstructionGraph, path: InstructionPath) -> list[int] | None:
    """Locate the stored node of each path instruction; None when absent."""
    text_to_node: dict[str, list[int]] = {}
    for node_id, node in sorted(graph.nodes.items()):
        for text in node.instructions:
            text_to_node.setdefault(text, []).append(node_id)
    sequence = []
    previous = None
    for text in path.instructions:
        homes = text_to_node.get(text)
        if not homes:
            return None
        chosen = next((h for h in homes if h != previous), homes[0])
        sequence.append(chosen)
        previous = chosen
    return sequence


def make_warmstart_dataset(
    graph: InstructionGraph,
    support: TaskCorpus,
    samples_per_question: int = 8,
    rng_seed: int = 0,
) -> list[WarmstartExample]:
    """Labeled states from support questions.

    Nodes on a question's gold path yield label 1 with the path's true
    incoming edge; sampled off-path nodes yield label 0. Sampling is
    balanced per question where the graph allows it.
    """
    rng = np.random.default_rng(rng_seed)
    examples: list[WarmstartExample] = []
    all_nodes = sorted(graph.nodes)
    if not all_nodes:
        return examples
    for question in support.iter_questions():
        gold = question.gold_path
        if gold is None:
            continue
        query = embed_text(question.text, graph.embedder)
        sequence = _path_node_sequence(graph, gold)
        if sequence is None:
            continue
        positives: list[tuple[int, EdgeSet | None]] = []
        for idx, node_id in enumerate(sequence):
            in_edge = None
            if idx > 0:
                in_edge = graph.edges.get((sequence[idx - 1], node_id))
            positives.append((node_id, in_edge))
        on_path = set(sequence)
        negatives_pool = [n for n in all_nodes if n not in on_path]
        positive_cap = max(1, samples_per_question // 2)
        if len(positives) > positive_cap:
            picked = rng.choice(len(positives), size=positive_cap, replace=False)
            positives = [positives[i] for i in sorted(picked)]
        n_neg = min(len(negatives_pool), samples_per_question - len(positives), len(positives))
        chosen_negatives = []
        if negatives_pool and n_neg > 0:
            picked = rng.choice(len(negatives_pool), size=n_neg, replace=False)
            chosen_negatives = [negatives_pool[i] for i in sorted(picked)]
        for node_id, in_edge in positives:
            examples.append(
                WarmstartExample(
                    state=build_state(graph, query, node_id, in_edge),
                    label=1,
                    node_id=node_id,
                    task_id=question.task_id,
                    question_id=question.question_id,
                )
            )
        for node_id in chosen_negatives:
            in_edges = graph.in_edges(node_id)
            in_edge = None
            if in_edges:
                in_edge = in_edges[int(rng.integers(len(in_edges)))]
            examples.append(
                WarmstartExample(
                    state=build_state(graph, query, node_id, in_edge),
                    label=0,
                    node_id=node_id,
                    task_id=question.task_id,
                    question_id=question.question_id,
                )
            )
    return examples


def save_policy(params: PolicyParams, destination) -> None:
    write_versioned(
        destination,
        POLICY_KIND,
        {
            "shapes": {
                "w1": list(params.w1.shape),
                "b1": list(params.b1.shape),
                "w2": list(params.w2.shape),
                "b2": list(params.b2.shape),
            },
            "data": {
                "w1": floats_to_hex(params.w1.ravel(), dtype="<f8"),
                "b1": floats_to_hex(params.b1.ravel(), dtype="<f8"),
                "w2": floats_to_hex(params.w2.ravel(), dtype="<f8"),
                "b2": floats_to_hex(params.b2.ravel(), dtype="<f8"),
            },
        },
    )


def load_policy(source) -> PolicyParams:
    doc = read_versioned(source, POLICY_KIND)
    try:
        shapes = doc["shapes"]
        data = doc["data"]
        arrays = {}
        for name in ("w1", "b1", "w2", "b2"):
            shape = tuple(shapes[name])
            arrays[name] = hex_to_floats(
                data[name], int(np.prod(shape)), dtype="<f8"
            ).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedFileError(f"{source}: malformed policy file: {exc}") from exc
    return PolicyParams(**arrays)
