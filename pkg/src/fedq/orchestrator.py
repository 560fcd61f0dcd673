"""End-to-end training driver: strategies, rounds, evaluation, metrics.

Strategies: 'fedq' (Q-learning agent picks N environments per round),
'random' (uniform N), 'full' (everyone), 'fedavg' (single component, full
participation), and 'local_only' (per-environment training, no sharing).
Every strategy starts with an initialization round over all environments;
metrics therefore cover rounds 0..K.

Per-round elapsed milliseconds come from a deterministic work-unit cost
model rather than the machine clock, so metrics files are byte-stable for
a given seed. Real wall time is reported separately as an informational
summary value.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import dqn as dqn_mod
from . import fedem, mlp, pca
from .data import EnvironmentShard
from .dqn import DqnConfig, QNetwork, ReplayBuffer, Transition
from .errors import ConfigInvalid, NumericalFailure, ZeroTotalWeight
from .fedem import ComponentSet
from .mlp import LearnerConfig, MlpParameters
from .pca import PcaProjection
from .seeding import split_seed

STRATEGIES = ("fedq", "random", "full", "fedavg", "local_only")

# Deterministic cost model (milliseconds) for the virtual round clock.
MS_ROUND_BASE = 1.0
MS_PER_TRAIN_VISIT = 0.002   # per sample visited by one local gradient step
MS_PER_ESTEP_TERM = 0.001    # per (train sample, component) loss evaluation
MS_PER_EVAL_TERM = 0.0005    # per (test sample, component) forward pass
MS_AGENT_STEP = 0.5          # selection + replay update in an agent round


@dataclass
class RunConfig:
    strategy: str = "fedq"
    select_n: int = 30
    rounds: int = 10
    mixtures: int = 2
    target_accuracy: float = 0.95
    seed: int = 0
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    dqn: DqnConfig = field(default_factory=DqnConfig)

    def label(self) -> str:
        if self.strategy in ("fedq", "random"):
            return f"{self.strategy}{self.select_n}"
        return self.strategy

    def effective_mixtures(self) -> int:
        # Single-component strategies ignore the mixtures setting.
        return 1 if self.strategy in ("fedavg", "local_only") else self.mixtures

    def validate(self, num_envs: int) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigInvalid(f"unknown strategy {self.strategy!r}")
        if self.rounds < 1:
            raise ConfigInvalid("rounds must be >= 1")
        if self.mixtures < 1:
            raise ConfigInvalid("mixtures must be >= 1")
        if not 0.0 < self.target_accuracy <= 1.0:
            raise ConfigInvalid("target_accuracy must be in (0, 1]")
        if self.strategy in ("fedq", "random") and not 1 <= self.select_n <= num_envs:
            raise ConfigInvalid(
                f"select_n must be in [1, {num_envs}] for strategy {self.strategy}")
        self.learner.validate()
        self.dqn.validate()


@dataclass
class RoundMetrics:
    round_index: int
    accuracy: float
    tpr: float
    fpr: float
    per_env_accuracy: list[float | None]
    selected: list[int]
    elapsed_ms: float
    cumulative_ms: float
    reward: float


@dataclass
class EvalResult:
    accuracy: float
    tpr: float
    fpr: float
    per_env: list[float | None]


@dataclass
class RunResult:
    config: dict
    metrics: list[RoundMetrics]
    rounds_to_target: int | None
    theta: ComponentSet | None = None
    Pi: np.ndarray | None = None
    local_models: list[MlpParameters] | None = None
    qnet: QNetwork | None = None
    buffer: ReplayBuffer | None = None
    projection: PcaProjection | None = None
    upload_events: int = 0
    wall_seconds: float = 0.0
    theta_history: list[list[np.ndarray]] | None = None

    @property
    def max_accuracy(self) -> float:
        return max(m.accuracy for m in self.metrics)


def config_snapshot(cfg: RunConfig) -> dict:
    return {
        "strategy": cfg.strategy,
        "select_n": cfg.select_n,
        "rounds": cfg.rounds,
        "mixtures": cfg.effective_mixtures(),
        "target_accuracy": cfg.target_accuracy,
        "seed": cfg.seed,
        "learner": {
            "hidden_units": cfg.learner.hidden_units,
            "learning_rate": cfg.learner.learning_rate,
            "local_steps": cfg.learner.local_steps,
            "batch_size": cfg.learner.batch_size,
            "grad_clip": cfg.learner.grad_clip,
        },
        "dqn": {
            "gamma": cfg.dqn.gamma,
            "xi": cfg.dqn.xi,
            "q_learning_rate": cfg.dqn.q_learning_rate,
            "minibatch": cfg.dqn.minibatch,
            "capacity": cfg.dqn.capacity,
            "tau": cfg.dqn.tau,
            "q_hidden": cfg.dqn.q_hidden,
            "d_pca": cfg.dqn.d_pca,
        },
    }


def evaluate(theta: ComponentSet, Pi: np.ndarray, shards: list[EnvironmentShard],
             threshold: float = 0.5) -> EvalResult:
    """Pooled test-set confusion metrics under per-environment mixtures.

    Each environment scores its own test rows with its own mixture weights;
    accuracy/TPR/FPR are computed over the pooled confusion counts. A
    probability exactly at the threshold predicts 1.
    """
    tp = fp = tn = fn = 0
    per_env: list[float | None] = []
    for shard in shards:
        if shard.test_X.shape[0] == 0:
            per_env.append(None)
            continue
        probs = fedem.mixture_predict_batch(shard.test_X, theta, Pi[shard.env_id])
        preds = (probs >= threshold).astype(np.int64)
        y = shard.test_y
        tp += int(((preds == 1) & (y == 1)).sum())
        fp += int(((preds == 1) & (y == 0)).sum())
        tn += int(((preds == 0) & (y == 0)).sum())
        fn += int(((preds == 0) & (y == 1)).sum())
        per_env.append(float((preds == y).mean()))
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    tpr = tp / (tp + fn) if (tp + fn) else 0.0
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    return EvalResult(accuracy=accuracy, tpr=tpr, fpr=fpr, per_env=per_env)


def evaluate_local(models: list[MlpParameters], shards: list[EnvironmentShard],
                   threshold: float = 0.5) -> EvalResult:
    """Pooled metrics where each environment uses its own private model."""
    tp = fp = tn = fn = 0
    per_env: list[float | None] = []
    for shard, model in zip(shards, models):
        if shard.test_X.shape[0] == 0:
            per_env.append(None)
            continue
        probs = mlp.forward_batch(model, shard.test_X)
        preds = (probs >= threshold).astype(np.int64)
        y = shard.test_y
        tp += int(((preds == 1) & (y == 1)).sum())
        fp += int(((preds == 1) & (y == 0)).sum())
        tn += int(((preds == 0) & (y == 0)).sum())
        fn += int(((preds == 0) & (y == 1)).sum())
        per_env.append(float((preds == y).mean()))
    total = tp + fp + tn + fn
    accuracy = (tp + tn) / total if total else 0.0
    tpr = tp / (tp + fn) if (tp + fn) else 0.0
    fpr = fp / (fp + tn) if (fp + tn) else 0.0
    return EvalResult(accuracy=accuracy, tpr=tpr, fpr=fpr, per_env=per_env)


def em_round(selected: list[int], theta: ComponentSet, Pi: np.ndarray,
             shards: list[EnvironmentShard], learner_cfg: LearnerConfig,
             round_index: int, learner_seed: int,
             collect_uploads: bool = False):
    """One communication round over the selected environments.

    Every selected environment runs an E-step with its current mixture
    weights, refreshes those weights, trains a local copy of each component
    from the broadcast parameters, and uploads the copies. Components are
    then aggregated with n_t/n weights over the contributing environments.
    A component with zero responsibility mass on an environment is uploaded
    unchanged. Mixture-weight rows outside the selection are untouched.

    Returns (new components, new Pi, upload rows or None).
    """
    M = theta.num_components
    contribs: list[list[tuple[int, MlpParameters, int]]] = [[] for _ in range(M)]
    new_Pi = Pi.copy()
    uploads: list[np.ndarray] | None = [] if collect_uploads else None
    for t in sorted(selected):
        shard = shards[t]
        q = fedem.e_step(shard, theta, Pi[t])
        new_Pi[t] = fedem.m_step_pi(q)
        for m in range(M):
            seed = split_seed(learner_seed, f"local-{round_index}-{t}-{m}")
            try:
                theta_tm = fedem.m_step_theta(shard, q, theta.components[m], m,
                                              learner_cfg, seed=seed)
            except ZeroTotalWeight:
                theta_tm = theta.components[m].copy()
            contribs[m].append((t, theta_tm, shard.n_t))
            if uploads is not None:
                uploads.append(mlp.flatten(theta_tm))
    new_theta = ComponentSet([fedem.aggregate(contribs[m]) for m in range(M)])
    return new_theta, new_Pi, uploads


def _round_cost_ms(selected: list[int], shards: list[EnvironmentShard],
                   M: int, learner_cfg: LearnerConfig, total_test: int,
                   agent_round: bool, em: bool = True) -> float:
    cost = MS_ROUND_BASE
    for t in selected:
        n_t = shards[t].n_t
        visits = learner_cfg.local_steps * min(learner_cfg.batch_size, n_t) * M
        cost += visits * MS_PER_TRAIN_VISIT
        if em:
            cost += n_t * M * MS_PER_ESTEP_TERM
    cost += total_test * M * MS_PER_EVAL_TERM
    if agent_round:
        cost += MS_AGENT_STEP
    return cost


def _check_finite(theta: ComponentSet | None, Pi: np.ndarray | None,
                  ev: EvalResult, round_index: int) -> None:
    if theta is not None:
        for m, comp in enumerate(theta.components):
            if not np.all(np.isfinite(mlp.flatten(comp))):
                raise NumericalFailure(
                    f"component {m} diverged at round {round_index}", round_index)
    if Pi is not None and not np.all(np.isfinite(Pi)):
        raise NumericalFailure(f"mixture weights diverged at round {round_index}",
                               round_index)
    if not all(np.isfinite([ev.accuracy, ev.tpr, ev.fpr])):
        raise NumericalFailure(f"metrics diverged at round {round_index}", round_index)


def write_checkpoint(path: str, round_index: int, theta: ComponentSet,
                     Pi: np.ndarray) -> None:
    """Header (round, M, d, hidden, T) + flattened components + Pi, float64."""
    d, hidden = theta.components[0].d, theta.components[0].hidden
    header = np.array([round_index, theta.num_components, d, hidden, Pi.shape[0]],
                      dtype=np.float64)
    flats = [mlp.flatten(c) for c in theta.components]
    np.concatenate([header, *flats, Pi.ravel()]).tofile(path)


def read_checkpoint(path: str) -> tuple[int, ComponentSet, np.ndarray]:
    vec = np.fromfile(path, dtype=np.float64)
    round_index, M, d, hidden, T = (int(v) for v in vec[:5])
    D = mlp.param_dim(d, hidden)
    comps = [mlp.unflatten(vec[5 + m * D:5 + (m + 1) * D], d, hidden) for m in range(M)]
    Pi = vec[5 + M * D:].reshape(T, M)
    return round_index, ComponentSet(comps), Pi


def _run_local_only(cfg: RunConfig, shards: list[EnvironmentShard],
                    wall_start: float) -> RunResult:
    T = len(shards)
    d = shards[0].train_X.shape[1]
    learner_seed = split_seed(cfg.seed, "learner")
    base = mlp.init_params(d, cfg.learner.hidden_units, learner_seed)
    models = [base.copy() for _ in range(T)]
    total_test = sum(s.test_X.shape[0] for s in shards)
    all_ids = list(range(T))
    metrics: list[RoundMetrics] = []
    cumulative = 0.0
    for k in range(cfg.rounds + 1):
        for t in range(T):
            shard = shards[t]
            ones = np.ones(shard.n_t)
            seed = split_seed(learner_seed, f"local-{k}-{t}-0")
            models[t] = fedem.m_step_theta(shard, ones[:, None], models[t], 0,
                                           cfg.learner, seed=seed)
        ev = evaluate_local(models, shards)
        for t in range(T):
            if not np.all(np.isfinite(mlp.flatten(models[t]))):
                raise NumericalFailure(f"environment {t} model diverged at round {k}", k)
        _check_finite(None, None, ev, k)
        elapsed = _round_cost_ms(all_ids, shards, 1, cfg.learner, total_test,
                                 agent_round=False, em=False)
        cumulative += elapsed
        metrics.append(RoundMetrics(
            round_index=k, accuracy=ev.accuracy, tpr=ev.tpr, fpr=ev.fpr,
            per_env_accuracy=ev.per_env, selected=all_ids,
            elapsed_ms=elapsed, cumulative_ms=cumulative,
            reward=dqn_mod.reward(ev.accuracy, cfg.target_accuracy, cfg.dqn.xi)))
    reached = [m.round_index for m in metrics if m.accuracy >= cfg.target_accuracy]
    return RunResult(
        config=config_snapshot(cfg), metrics=metrics,
        rounds_to_target=reached[0] if reached else None,
        local_models=models, upload_events=0,
        wall_seconds=time.perf_counter() - wall_start)


def run(cfg: RunConfig, shards: list[EnvironmentShard],
        checkpoint_dir: str | None = None, keep_history: bool = False) -> RunResult:
    """Execute one full training run; deterministic for a given seed."""
    wall_start = time.perf_counter()
    T = len(shards)
    if T == 0:
        raise ConfigInvalid("no environment shards supplied")
    cfg.validate(T)
    if cfg.strategy == "local_only":
        return _run_local_only(cfg, shards, wall_start)

    M = cfg.effective_mixtures()
    d = shards[0].train_X.shape[1]
    learner_seed = split_seed(cfg.seed, "learner")
    theta = ComponentSet([mlp.init_params(d, cfg.learner.hidden_units, learner_seed + m)
                          for m in range(M)])
    Pi = np.full((T, M), 1.0 / M)
    total_test = sum(s.test_X.shape[0] for s in shards)
    all_ids = list(range(T))
    is_fedq = cfg.strategy == "fedq"
    is_random = cfg.strategy == "random"

    upload_events = 0
    metrics: list[RoundMetrics] = []
    history: list[list[np.ndarray]] | None = [] if keep_history else None
    cumulative = 0.0

    def record_round(k: int, ev: EvalResult, selected: list[int], agent_round: bool,
                     reward_value: float) -> None:
        nonlocal cumulative
        elapsed = _round_cost_ms(selected, shards, M, cfg.learner, total_test,
                                 agent_round=agent_round)
        cumulative += elapsed
        metrics.append(RoundMetrics(
            round_index=k, accuracy=ev.accuracy, tpr=ev.tpr, fpr=ev.fpr,
            per_env_accuracy=ev.per_env, selected=list(selected),
            elapsed_ms=elapsed, cumulative_ms=cumulative, reward=reward_value))
        if history is not None:
            history.append([mlp.flatten(c) for c in theta.components])
        if checkpoint_dir is not None:
            write_checkpoint(f"{checkpoint_dir}/round_{k:04d}.bin", k, theta, Pi)

    # Initialization round over all environments.
    theta, Pi, uploads = em_round(all_ids, theta, Pi, shards, cfg.learner,
                                  round_index=0, learner_seed=learner_seed,
                                  collect_uploads=is_fedq)
    upload_events += T
    ev = evaluate(theta, Pi, shards)
    _check_finite(theta, Pi, ev, 0)
    record_round(0, ev, all_ids, agent_round=False,
                 reward_value=dqn_mod.reward(ev.accuracy, cfg.target_accuracy, cfg.dqn.xi))

    projection = qnet = buffer = None
    select_rng = replay_rng = None
    state = None
    if is_fedq:
        rows = np.vstack(uploads)
        d_eff = min(cfg.dqn.d_pca, rows.shape[1], rows.shape[0] - 1)
        projection = pca.fit_pca(rows, d_eff)
        qnet = dqn_mod.init_qnetwork(M * d_eff, cfg.dqn.q_hidden, T,
                                     split_seed(cfg.seed, "qnet"))
        buffer = ReplayBuffer(cfg.dqn.capacity)
        select_rng = np.random.default_rng(split_seed(cfg.seed, "select"))
        replay_rng = np.random.default_rng(split_seed(cfg.seed, "replay"))
        state = pca.build_state(projection, theta)
    elif is_random:
        select_rng = np.random.default_rng(split_seed(cfg.seed, "select"))

    for k in range(1, cfg.rounds + 1):
        if is_fedq:
            selected = dqn_mod.select_environments(qnet, state, cfg.select_n,
                                                   cfg.dqn.tau, select_rng)
        elif is_random:
            selected = sorted(int(i) for i in
                              select_rng.choice(T, size=cfg.select_n, replace=False))
        else:
            selected = all_ids
        theta, Pi, _ = em_round(selected, theta, Pi, shards, cfg.learner,
                                round_index=k, learner_seed=learner_seed)
        upload_events += len(selected)
        ev = evaluate(theta, Pi, shards)
        _check_finite(theta, Pi, ev, k)
        r = dqn_mod.reward(ev.accuracy, cfg.target_accuracy, cfg.dqn.xi)
        if is_fedq:
            next_state = pca.build_state(projection, theta)
            transition = Transition(state=state, action=tuple(selected), reward=r,
                                    next_state=next_state,
                                    terminal=ev.accuracy >= cfg.target_accuracy)
            dqn_mod.store(buffer, transition)
            minibatch = dqn_mod.sample_minibatch(buffer, cfg.dqn.minibatch, replay_rng)
            qnet = dqn_mod.train_step(qnet, minibatch, cfg.dqn.gamma,
                                      cfg.dqn.q_learning_rate)
            if not np.all(np.isfinite(dqn_mod.q_flatten(qnet))):
                raise NumericalFailure(f"selection agent diverged at round {k}", k)
            state = next_state
        record_round(k, ev, selected, agent_round=is_fedq, reward_value=r)

    reached = [m.round_index for m in metrics if m.accuracy >= cfg.target_accuracy]
    return RunResult(
        config=config_snapshot(cfg), metrics=metrics,
        rounds_to_target=reached[0] if reached else None,
        theta=theta, Pi=Pi, qnet=qnet, buffer=buffer, projection=projection,
        upload_events=upload_events,
        wall_seconds=time.perf_counter() - wall_start,
        theta_history=history)


@dataclass
class CompareRow:
    label: str
    repeats: int
    median_max_accuracy: float
    p25_max_accuracy: float
    p75_max_accuracy: float
    median_rounds_to_target: float
    p25_rounds_to_target: float
    p75_rounds_to_target: float
    median_ms_to_target: float
    p25_ms_to_target: float
    p75_ms_to_target: float


def _quantile(values: np.ndarray, p: float) -> float:
    """Linear-interpolation quantile that keeps infinities infinite.

    np.quantile turns a pair of equal infinities into NaN because its
    interpolation subtracts them; unreached-target statistics must stay inf.
    """
    v = np.sort(np.asarray(values, dtype=np.float64))
    pos = p * (v.shape[0] - 1)
    lo = int(np.floor(pos))
    hi = int(np.ceil(pos))
    frac = pos - lo
    if v[lo] == v[hi] or frac == 0.0:
        return float(v[lo])
    if not np.isfinite(v[hi]):
        return float(v[hi])
    return float(v[lo] + (v[hi] - v[lo]) * frac)


def compare(configs: list[RunConfig], shards: list[EnvironmentShard],
            repeats: int) -> tuple[list[CompareRow], dict[str, list[tuple[float, float, float]]]]:
    """Run each config over `repeats` seeds and summarize the outcomes.

    Repeat r of a config runs with seed cfg.seed + r. Rows report the
    median and quartiles of max accuracy, rounds to target, and virtual
    milliseconds to target (infinite when the target is never reached).
    Also returns per-label round series of median (accuracy, tpr, fpr).
    """
    if len(configs) < 2:
        raise ConfigInvalid("compare needs at least two configurations")
    if repeats < 1:
        raise ConfigInvalid("repeats must be >= 1")
    rows: list[CompareRow] = []
    series: dict[str, list[tuple[float, float, float]]] = {}
    used_labels: set[str] = set()
    for cfg in configs:
        results = [run(replace(cfg, seed=cfg.seed + r), shards) for r in range(repeats)]
        max_accs = np.array([res.max_accuracy for res in results])
        rounds_to = np.array([
            float(res.rounds_to_target) if res.rounds_to_target is not None else np.inf
            for res in results])
        ms_to = np.array([
            res.metrics[res.rounds_to_target].cumulative_ms
            if res.rounds_to_target is not None else np.inf
            for res in results])
        label = cfg.label()
        if label in used_labels:
            suffix = 2
            while f"{label}-{suffix}" in used_labels:
                suffix += 1
            label = f"{label}-{suffix}"
        used_labels.add(label)
        rows.append(CompareRow(
            label=label, repeats=repeats,
            median_max_accuracy=_quantile(max_accs, 0.5),
            p25_max_accuracy=_quantile(max_accs, 0.25),
            p75_max_accuracy=_quantile(max_accs, 0.75),
            median_rounds_to_target=_quantile(rounds_to, 0.5),
            p25_rounds_to_target=_quantile(rounds_to, 0.25),
            p75_rounds_to_target=_quantile(rounds_to, 0.75),
            median_ms_to_target=_quantile(ms_to, 0.5),
            p25_ms_to_target=_quantile(ms_to, 0.25),
            p75_ms_to_target=_quantile(ms_to, 0.75),
        ))
        per_round = []
        for k in range(cfg.rounds + 1):
            accs = np.array([res.metrics[k].accuracy for res in results])
            tprs = np.array([res.metrics[k].tpr for res in results])
            fprs = np.array([res.metrics[k].fpr for res in results])
            per_round.append((float(np.median(accs)), float(np.median(tprs)),
                              float(np.median(fprs))))
        series[label] = per_round
    return rows, series
