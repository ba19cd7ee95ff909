"""The three-stage loop: meta-training, few-shot adaptation, testing.

Meta-training alternates task-wise inner adaptation (warm-start for the
traversal policy, alignment/match pre-training for the encoder) with
outer updates driven by the full retrieval loop: traverse, select,
prompt, plan, score. Outer gradients are first-order: they are taken at
the adapted parameters and applied to the base ones. Few-shot
adaptation extends the graph with the new support set and derives
per-task parameters; testing evaluates each task with its own adapted
bundle and reports per-task plus macro averages.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from .corpus import MetricKind, Question, TaskCorpus, score
from .embedding import EmbedderConfig
from .encoder import (
    EncoderParams,
    PathPool,
    candidate_similarities,
    evaluate_pool,
    ft_loss_and_grads,
    init_encoder_params,
    pt_loss_and_grads,
)
from .errors import ConfigError, DataError
from .graph import InstructionGraph, build_graph, extend_graph
from .optim import AdamState, ReturnBaseline, adam_step
from .policy import (
    PolicyParams,
    RlConfig,
    bce_loss_and_grad,
    episode_returns,
    init_policy_params,
    make_warmstart_dataset,
    pg_loss_and_grad,
    traverse,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 0.001
    inner_steps: int = 1
    questions_per_batch: int = 8
    tasks_per_meta_batch: int = 4
    iterations: int = 100
    seed: int = 0
    first_order: bool = True
    pool_extra_negatives: int = 2
    strict_qpa: bool = False

    def __post_init__(self) -> None:
        if not self.first_order:
            raise ConfigError(
                "second-order meta-gradients are not supported; set first_order=True"
            )
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")


@dataclass
class AgentBundle:
    policy: PolicyParams
    encoder: EncoderParams
    graph: InstructionGraph
    rl_config: RlConfig

    def copy(self) -> "AgentBundle":
        return AgentBundle(
            policy=self.policy.copy(),
            encoder=self.encoder.copy(),
            graph=self.graph,
            rl_config=self.rl_config,
        )


@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)
    per_task: dict[str, dict] = field(default_factory=dict)
    macro_average: float = 0.0

    def task_mean(self, task_id: str) -> float:
        return self.per_task[task_id]["mean_delta"]


def _stable_int(*parts) -> int:
    text = "|".join(str(p) for p in parts)
    return int.from_bytes(
        hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little"
    )


def _rng(*parts) -> np.random.Generator:
    return np.random.default_rng(_stable_int(*parts))


def init_bundle(
    graph: InstructionGraph, rl_config: RlConfig, seed: int = 0
) -> AgentBundle:
    return AgentBundle(
        policy=init_policy_params(seed=_stable_int(seed, "policy-init") % (1 << 31)),
        encoder=init_encoder_params(
            graph.embedder, seed=_stable_int(seed, "encoder-init") % (1 << 31)
        ),
        graph=graph,
        rl_config=rl_config,
    )


def _sample_questions(
    corpus: TaskCorpus, task_id: str, count: int, rng: np.random.Generator
) -> list[Question]:
    questions = sorted(corpus.questions(task_id), key=lambda q: q.question_id)
    questions = [q for q in questions if q.gold_path is not None]
    if len(questions) <= count:
        return questions
    picked = rng.choice(len(questions), size=count, replace=False)
    return [questions[i] for i in sorted(picked)]


def _single_task_corpus(questions: list[Question]) -> TaskCorpus:
    corpus = TaskCorpus()
    for question in questions:
        corpus.add(question)
    return corpus


def _adapt_policy_inner(
    policy: PolicyParams,
    graph: InstructionGraph,
    questions: list[Question],
    config: MetaConfig,
    rng_seed: int,
) -> PolicyParams:
    examples = make_warmstart_dataset(
        graph, _single_task_corpus(questions), samples_per_question=8, rng_seed=rng_seed
    )
    if not examples:
        return policy.copy()
    states = np.stack([e.state for e in examples])
    labels = np.array([e.label for e in examples], dtype=np.float64)
    vector = policy.to_vector()
    for _ in range(config.inner_steps):
        _, grad = bce_loss_and_grad(PolicyParams.from_vector(vector), states, labels)
        vector = vector - config.inner_lr * grad
    return PolicyParams.from_vector(vector)


def _adapt_encoder_inner(
    encoder: EncoderParams,
    questions: list[Question],
    config: MetaConfig,
) -> EncoderParams:
    pairs = [(q.text, q.gold_path) for q in questions if q.gold_path is not None]
    if not pairs:
        return encoder.copy()
    vector = encoder.to_vector()
    for _ in range(config.inner_steps):
        _, _, grads = pt_loss_and_grads(
            encoder.with_vector(vector), pairs, strict=config.strict_qpa
        )
        vector = vector - config.inner_lr * grads.to_vector()
    return encoder.with_vector(vector)


def _sample_negative_paths(
    corpus: TaskCorpus, exclude_question: str, count: int, rng: np.random.Generator
):
    pool = [
        q.gold_path
        for q in corpus.iter_questions()
        if q.question_id != exclude_question and q.gold_path is not None
    ]
    if not pool or count <= 0:
        return []
    picked = rng.choice(len(pool), size=min(count, len(pool)), replace=False)
    return [pool[i] for i in sorted(picked)]


def _roll_question(
    question: Question,
    policy: PolicyParams,
    encoder: EncoderParams,
    graph: InstructionGraph,
    rl_config: RlConfig,
    negatives_from: TaskCorpus,
    backend,
    metric: MetricKind,
    config: MetaConfig,
    mode: str,
    rng: np.random.Generator,
):
    """Full loop for one question: traverse, pool, select, score.

    Returns (record, selected_episode, pool) where episode and pool are
    None when traversal produced no candidates.
    """
    candidates = traverse(
        graph,
        question.text,
        policy,
        rl_config,
        mode=mode,
        rng=rng,
        task_id=question.task_id,
        question_id=question.question_id,
    )
    if not candidates:
        record = {
            "task_id": question.task_id,
            "question_id": question.question_id,
            "selected_path": "",
            "answer": "",
            "delta": 0.0,
            "episode_len": 0,
            "candidates": 0,
        }
        return record, None, None
    paths = [c.path for c in candidates]
    extras = _sample_negative_paths(
        negatives_from, question.question_id, config.pool_extra_negatives, rng
    )
    pool = PathPool.from_paths(paths + extras)
    evaluate_pool(question, pool, backend, metric)
    sims = candidate_similarities(encoder, question.text, paths)
    selected = int(np.argmax(sims))
    entry = pool.entries[selected]
    episode = candidates[selected].episode
    episode.reward = float(entry.delta)
    record = {
        "task_id": question.task_id,
        "question_id": question.question_id,
        "selected_path": paths[selected].serialized(),
        "answer": entry.answer,
        "delta": float(entry.delta),
        "episode_len": len(episode.steps),
        "candidates": len(candidates),
    }
    return record, episode, pool


def meta_train(
    support: TaskCorpus,
    query: TaskCorpus,
    config: MetaConfig,
    *,
    delta: float,
    embedder: EmbedderConfig,
    rl_config: RlConfig,
    backend,
    metric: MetricKind,
) -> tuple[AgentBundle, list[dict]]:
    """Meta-train both agents over seen tasks; returns the bundle and a
    per-question training log."""
    graph = build_graph(support, delta, embedder)
    bundle = init_bundle(graph, rl_config, seed=config.seed)
    policy_vec = bundle.policy.to_vector()
    encoder_vec = bundle.encoder.to_vector()
    policy_opt = AdamState.zeros(policy_vec.size)
    encoder_opt = AdamState.zeros(encoder_vec.size)
    baseline = ReturnBaseline(window=rl_config.baseline_window)
    log: list[dict] = []
    task_ids = [t for t in support.task_ids() if support.questions(t)]
    if not task_ids:
        return bundle, log

    for iteration in range(config.iterations):
        iter_rng = _rng(config.seed, "tasks", iteration)
        batch_size = min(config.tasks_per_meta_batch, len(task_ids))
        picked = iter_rng.choice(len(task_ids), size=batch_size, replace=False)
        batch = [task_ids[i] for i in sorted(picked)]
        policy_grad = np.zeros_like(policy_vec)
        encoder_grad = np.zeros_like(encoder_vec)
        for task_id in batch:
            sample_rng = _rng(config.seed, "support-batch", iteration, task_id)
            inner_questions = _sample_questions(
                support, task_id, config.questions_per_batch, sample_rng
            )
            if not inner_questions:
                logger.warning("task %s has no usable support questions; skipped", task_id)
                continue
            base_policy = PolicyParams.from_vector(policy_vec)
            base_encoder = bundle.encoder.with_vector(encoder_vec)
            adapted_policy = _adapt_policy_inner(
                base_policy,
                graph,
                inner_questions,
                config,
                rng_seed=_stable_int(config.seed, "ws", iteration, task_id) % (1 << 31),
            )
            adapted_encoder = _adapt_encoder_inner(base_encoder, inner_questions, config)
            query_rng = _rng(config.seed, "query-batch", iteration, task_id)
            outer_questions = _sample_questions(
                query, task_id, config.questions_per_batch, query_rng
            )
            if not outer_questions:
                logger.warning("task %s has no query questions; skipped", task_id)
                continue
            for question in outer_questions:
                roll_rng = _rng(
                    config.seed, "roll", iteration, task_id, question.question_id
                )
                record, episode, pool = _roll_question(
                    question,
                    adapted_policy,
                    adapted_encoder,
                    graph,
                    rl_config,
                    support,
                    backend,
                    metric,
                    config,
                    mode="sample",
                    rng=roll_rng,
                )
                record["iteration"] = iteration
                log.append(record)
                if episode is None:
                    continue
                baseline_value = baseline.value() if rl_config.use_baseline else 0.0
                _, pg_grad = pg_loss_and_grad(
                    adapted_policy, episode, rl_config.gamma, baseline_value
                )
                policy_grad += pg_grad
                for value in episode_returns(episode, rl_config.gamma):
                    baseline.update(float(value))
                _, ft_grads = ft_loss_and_grads(
                    adapted_encoder, question.text, pool, strict=config.strict_qpa
                )
                encoder_grad += ft_grads.to_vector()
        policy_vec = adam_step(policy_vec, policy_grad, policy_opt, config.outer_lr)
        encoder_vec = adam_step(encoder_vec, encoder_grad, encoder_opt, config.outer_lr)
    bundle.policy = PolicyParams.from_vector(policy_vec)
    bundle.encoder = bundle.encoder.with_vector(encoder_vec)
    return bundle, log


def fewshot_adapt(
    bundle: AgentBundle,
    new_support: TaskCorpus,
    config: MetaConfig,
    *,
    backend,
    metric: MetricKind,
) -> tuple[dict[str, AgentBundle], InstructionGraph]:
    """Per-task adaptation on an unseen support set over the extended graph.

    The base bundle and its graph are never mutated. Tasks without
    usable support questions come back unadapted and flagged in the log.
    """
    extended = extend_graph(bundle.graph, new_support)
    adapted: dict[str, AgentBundle] = {}
    for task_id in new_support.task_ids():
        sample_rng = _rng(config.seed, "fewshot", task_id)
        questions = _sample_questions(
            new_support, task_id, config.questions_per_batch, sample_rng
        )
        if not questions:
            logger.warning("few-shot task %s has no usable questions; unadapted", task_id)
            adapted[task_id] = AgentBundle(
                policy=bundle.policy.copy(),
                encoder=bundle.encoder.copy(),
                graph=extended,
                rl_config=bundle.rl_config,
            )
            continue
        policy = _adapt_policy_inner(
            bundle.policy,
            extended,
            questions,
            config,
            rng_seed=_stable_int(config.seed, "fewshot-ws", task_id) % (1 << 31),
        )
        encoder = _adapt_encoder_inner(bundle.encoder, questions, config)
        policy_vec = policy.to_vector()
        encoder_vec = encoder.to_vector()
        pg_grad = np.zeros_like(policy_vec)
        ft_grad = np.zeros_like(encoder_vec)
        baseline = ReturnBaseline(window=bundle.rl_config.baseline_window)
        for question in questions:
            roll_rng = _rng(config.seed, "fewshot-roll", task_id, question.question_id)
            _, episode, pool = _roll_question(
                question,
                policy,
                encoder,
                extended,
                bundle.rl_config,
                new_support,
                backend,
                metric,
                config,
                mode="sample",
                rng=roll_rng,
            )
            if episode is None:
                continue
            baseline_value = baseline.value() if bundle.rl_config.use_baseline else 0.0
            _, grad = pg_loss_and_grad(
                policy, episode, bundle.rl_config.gamma, baseline_value
            )
            pg_grad += grad
            for value in episode_returns(episode, bundle.rl_config.gamma):
                baseline.update(float(value))
            _, grads = ft_loss_and_grads(
                encoder, question.text, pool, strict=config.strict_qpa
            )
            ft_grad += grads.to_vector()
        policy_vec = policy_vec - config.outer_lr * pg_grad
        encoder_vec = encoder_vec - config.outer_lr * ft_grad
        adapted[task_id] = AgentBundle(
            policy=PolicyParams.from_vector(policy_vec),
            encoder=bundle.encoder.with_vector(encoder_vec),
            graph=extended,
            rl_config=bundle.rl_config,
        )
    return adapted, extended


def answer_question(
    bundle: AgentBundle,
    question: Question,
    backend,
    metric: MetricKind,
    mode: str = "greedy",
    rng: np.random.Generator | None = None,
) -> dict:
    """One test-time pass: traverse, select, prompt, plan, score."""
    try:
        candidates = traverse(
            bundle.graph,
            question.text,
            bundle.policy,
            bundle.rl_config,
            mode=mode,
            rng=rng,
            task_id=question.task_id,
            question_id=question.question_id,
        )
    except DataError:
        candidates = []
    if not candidates:
        return {
            "task_id": question.task_id,
            "question_id": question.question_id,
            "selected_path": "",
            "answer": "",
            "delta": 0.0,
            "episode_len": 0,
            "candidates": 0,
            "failed": True,
        }
    paths = [c.path for c in candidates]
    sims = candidate_similarities(bundle.encoder, question.text, paths)
    selected = int(np.argmax(sims))
    result = backend.plan(question, paths[selected])
    if result.ok:
        if metric is MetricKind.REWARD_SCORE and result.reward is not None:
            delta = float(result.reward)
        else:
            delta = score(metric, result.answer, question.answer)
    else:
        delta = 0.0
    return {
        "task_id": question.task_id,
        "question_id": question.question_id,
        "selected_path": paths[selected].serialized(),
        "answer": result.answer,
        "delta": delta,
        "episode_len": len(candidates[selected].episode.steps),
        "candidates": len(candidates),
        "failed": not result.ok,
    }


def evaluate_bundle(
    bundle: AgentBundle, corpus: TaskCorpus, backend, metric: MetricKind
) -> EvalReport:
    records = [
        answer_question(bundle, question, backend, metric)
        for question in corpus.iter_questions()
    ]
    return summarize_records(records)


def summarize_records(records: list[dict]) -> EvalReport:
    per_task: dict[str, dict] = {}
    for record in records:
        bucket = per_task.setdefault(
            record["task_id"], {"deltas": [], "failures": 0}
        )
        bucket["deltas"].append(record["delta"])
        if record.get("failed"):
            bucket["failures"] += 1
    summary = {}
    for task_id, bucket in sorted(per_task.items()):
        summary[task_id] = {
            "mean_delta": float(np.mean(bucket["deltas"])),
            "question_count": len(bucket["deltas"]),
            "failures": bucket["failures"],
        }
    macro = float(np.mean([s["mean_delta"] for s in summary.values()])) if summary else 0.0
    return EvalReport(records=records, per_task=summary, macro_average=macro)


def meta_test(
    adapted: dict[str, AgentBundle],
    query: TaskCorpus,
    metric: MetricKind,
    backend,
    default_bundle: AgentBundle | None = None,
) -> EvalReport:
    """Evaluate each task's query questions with that task's bundle."""
    records = []
    for task_id in query.task_ids():
        bundle = adapted.get(task_id, default_bundle)
        if bundle is None:
            raise DataError(f"no adapted bundle for task {task_id} and no default")
        for question in sorted(query.questions(task_id), key=lambda q: q.question_id):
            records.append(answer_question(bundle, question, backend, metric))
    return summarize_records(records)
