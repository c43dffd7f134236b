"""Hybrid protocol runner: teacher-driven at first, student-driven once a rank
test says the trained student is statistically better.

Each episode splits a fixed TTI budget between student training and goodput
measurement. Measurements from the current and the last ``k`` episodes are
pooled so a small per-episode measurement window still yields a full-size
sample for the one-sided Mann-Whitney U test against a precomputed reference
sample of teacher goodput. The switch latches: once the student takes over,
measurement stops and the whole budget goes to training.

The same runner covers the degenerate configurations exactly: a measurement
window of zero means the student drives from the first episode (no teacher
in the testing phase), and a window equal to the full episode leaves no
training time, so the run degenerates to the pure teacher protocol.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .distill import DistillConfig, TeacherCache, TeacherReplay, make_composite_grad_fn
from .env import ChannelSim, RewardConfig, SimConfig, goodput
from .metrics import TargetGrid, meta_resilience
from .npm import NpmParams
from .rng import substream
from .teacher import Instruction, run_tpm_episode
from .train import (
    ReplayMemory,
    TrainConfig,
    make_optimizer_state,
    run_greedy_episode,
    run_training_episode,
)

__all__ = [
    "SwitchConfig",
    "SwitchState",
    "T3Result",
    "SweepResult",
    "mann_whitney_one_sided",
    "measure_goodput",
    "pool_measurements",
    "should_switch",
    "measure_tpm_reference",
    "run_tpm_series",
    "run_t3npm",
    "sweep_tm",
]

MEASURE_WINDOW = 12          # TTIs per goodput sample
EXACT_TEST_LIMIT = 400       # run the exact U-test path while n1*n2 <= this


# --- one-sided Mann-Whitney U --------------------------------------------

def _average_ranks_doubled(values: np.ndarray) -> np.ndarray:
    """Average ranks of ``values`` scaled by 2 so ties stay integral."""
    order = np.argsort(values, kind="stable")
    doubled = np.empty(len(values), dtype=np.int64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for t in range(i, j + 1):
            doubled[order[t]] = i + j + 2   # twice the average of ranks i+1..j+1
        i = j + 1
    return doubled


def _exact_upper_tail(doubled_ranks, n2: int, observed_sum: int) -> float:
    """P(sum of a uniformly chosen size-``n2`` subset >= observed) by counting.

    Dynamic program over subset size and doubled-rank sum; exact for any tie
    pattern. Counts are integers; they stay below 2**53 for every sample
    size the automatic exact path accepts, so the vectorized float64 version
    is still exact counting. Larger forced-exact calls take the big-integer
    path instead.
    """
    total = int(sum(doubled_ranks))
    n = len(doubled_ranks)
    if math.comb(n, n2) < 2**53:
        dp = np.zeros((n2 + 1, total + 1))
        dp[0, 0] = 1.0
        for w in doubled_ranks:
            w = int(w)
            for j in range(n2 - 1, -1, -1):
                dp[j + 1, w:] += dp[j, :total + 1 - w]
        tail = float(dp[n2, observed_sum:].sum())
        return tail / math.comb(n, n2)
    dp = [[0] * (total + 1) for _ in range(n2 + 1)]
    dp[0][0] = 1
    for w in doubled_ranks:
        w = int(w)
        for j in range(n2 - 1, -1, -1):
            row, nxt = dp[j], dp[j + 1]
            for s in range(total - w, -1, -1):
                c = row[s]
                if c:
                    nxt[s + w] += c
    tail = sum(dp[n2][observed_sum:])
    return tail / math.comb(n, n2)


def mann_whitney_one_sided(sample_a, sample_b, method: str = "auto") -> tuple:
    """U statistic for ``sample_b`` and the one-sided p-value for the
    alternative "median(b) > median(a)".

    Ties get average ranks. The p-value is exact (full enumeration over all
    group assignments of the pooled values) while ``len(a)*len(b)`` stays
    small; larger samples use the normal approximation with tie correction
    and a 0.5 continuity correction. ``method`` forces one path.
    """
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    n1, n2 = len(a), len(b)
    pooled = np.concatenate([a, b])
    doubled = _average_ranks_doubled(pooled)
    d_b = int(doubled[n1:].sum())
    u = (d_b - n2 * (n2 + 1)) / 2.0

    if method == "exact" or (method == "auto" and n1 * n2 <= EXACT_TEST_LIMIT):
        p = _exact_upper_tail([int(d) for d in doubled], n2, d_b)
        return float(u), float(p)

    n = n1 + n2
    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(((tie_counts**3) - tie_counts).sum()) / (n * (n - 1))
    var = (n1 * n2 / 12.0) * ((n + 1) - tie_term)
    if var <= 0:
        return float(u), 1.0
    z = (u - n1 * n2 / 2.0 - 0.5) / math.sqrt(var)
    return float(u), float(0.5 * math.erfc(z / math.sqrt(2.0)))


def should_switch(p_value: float, alpha: float) -> bool:
    """Strict comparison: switch only when p < alpha."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return p_value < alpha


# --- measurement ----------------------------------------------------------

def measure_goodput(
    params: NpmParams,
    sim_cfg: SimConfig,
    t_m: int,
    *,
    arrivals_rng: np.random.Generator,
    erasures_rng: np.random.Generator,
) -> list:
    """Greedy-policy goodput samples from a fresh environment.

    Runs ``t_m`` TTIs and returns one sample per 12-TTI window. The fresh
    instance guarantees measurement can never leak into training state.
    """
    if t_m % MEASURE_WINDOW != 0:
        raise ValueError(f"measurement TTIs must be a multiple of {MEASURE_WINDOW}")
    if t_m == 0:
        return []
    sim = ChannelSim(sim_cfg)
    flags = run_greedy_episode(sim, params, t_m,
                               arrivals_rng=arrivals_rng, erasures_rng=erasures_rng)
    return [
        float(np.mean(flags[i:i + MEASURE_WINDOW]))
        for i in range(0, t_m, MEASURE_WINDOW)
    ]


def pool_measurements(ring, k: int) -> list:
    """Concatenation of the last ``k+1`` episodes' samples, newest first."""
    episodes = list(ring)
    if len(episodes) < k + 1:
        raise ValueError(f"need {k + 1} measured episodes, have {len(episodes)}")
    pooled = []
    for samples in reversed(episodes[-(k + 1):]):
        pooled.extend(samples)
    return pooled


@dataclass
class SwitchConfig:
    """Measurement/test budget: ``t_m`` TTIs per episode go to measurement,
    pooled over enough past episodes to reach ``total_measure_ttis`` worth of
    samples; ``alpha`` is the significance level for the switch."""

    t_m: int = 24
    alpha: float = 0.05
    total_measure_ttis: int = 144

    def __post_init__(self):
        if self.t_m < 0 or self.t_m % MEASURE_WINDOW != 0:
            raise ValueError(f"t_m must be a non-negative multiple of {MEASURE_WINDOW}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.total_measure_ttis < MEASURE_WINDOW or self.total_measure_ttis % MEASURE_WINDOW:
            raise ValueError(f"total_measure_ttis must be a positive multiple of {MEASURE_WINDOW}")

    @property
    def k(self) -> int:
        """Number of past episodes pooled with the current one."""
        if self.t_m == 0:
            raise ValueError("k is undefined without measurement (t_m = 0)")
        return math.ceil(self.total_measure_ttis / self.t_m) - 1


class SwitchState:
    """Latched teacher-to-student indicator plus the measurement ring."""

    def __init__(self, k: int):
        self.switched = False
        self.switch_episode: int | None = None
        self.ring = deque(maxlen=k + 1)

    def record(self, samples: list) -> None:
        if self.switched:
            raise ValueError("measurement after the switch is never used")
        self.ring.append(list(samples))

    @property
    def full(self) -> bool:
        return len(self.ring) == self.ring.maxlen

    def latch(self, episode: int) -> None:
        if not self.switched:
            self.switched = True
            self.switch_episode = episode


# --- protocol series ------------------------------------------------------

@dataclass
class T3Result:
    """Everything a protocol run produces, episode by episode."""

    goodputs: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    epsilons: list = field(default_factory=list)
    protocols: list = field(default_factory=list)
    switch_episode: int | None = None
    test_log: list = field(default_factory=list)   # (episode, U, p) triples
    tpm_reference: list | None = None
    params: NpmParams | None = None


def measure_tpm_reference(sim_cfg: SimConfig, backend, instruction: Instruction,
                          seed: int, total_ttis: int = 144) -> list:
    """Teacher goodput samples, precomputed once per run (12-TTI windows)."""
    if total_ttis % MEASURE_WINDOW != 0 or total_ttis <= 0:
        raise ValueError(f"total_ttis must be a positive multiple of {MEASURE_WINDOW}")
    sim = ChannelSim(sim_cfg)
    flags = run_tpm_episode(
        sim, backend, instruction, total_ttis,
        arrivals_rng=substream(seed, "tpm-measure-arrivals"),
        erasures_rng=substream(seed, "tpm-measure-erasures"),
    )
    return [
        float(np.mean(flags[i:i + MEASURE_WINDOW]))
        for i in range(0, total_ttis, MEASURE_WINDOW)
    ]


def _test_episode_tpm(sim_cfg, backend, instruction, seed, episode, ttis):
    sim = ChannelSim(sim_cfg)
    flags = run_tpm_episode(
        sim, backend, instruction, ttis,
        arrivals_rng=substream(seed, "test-arrivals", episode),
        erasures_rng=substream(seed, "test-erasures", episode),
    )
    return goodput(flags)


def _test_episode_student(sim_cfg, params, seed, episode, ttis):
    sim = ChannelSim(sim_cfg)
    flags = run_greedy_episode(
        sim, params, ttis,
        arrivals_rng=substream(seed, "test-arrivals", episode),
        erasures_rng=substream(seed, "test-erasures", episode),
    )
    return goodput(flags)


def run_tpm_series(sim_cfg: SimConfig, backend, instruction: Instruction,
                   *, seed: int, episodes: int) -> T3Result:
    """Teacher-only goodput series over the same testing streams the hybrid
    runner uses, so a no-training hybrid run reproduces it exactly."""
    result = T3Result()
    ttis = sim_cfg.tti_per_episode
    for episode in range(episodes):
        g = _test_episode_tpm(sim_cfg, backend, instruction, seed, episode, ttis)
        result.goodputs.append(g)
        result.losses.append(float("nan"))
        result.epsilons.append(float("nan"))
        result.protocols.append("tpm")
    return result


def run_t3npm(
    sim_cfg: SimConfig,
    initial_params: NpmParams,
    backend,
    instruction: Instruction | None,
    *,
    train_cfg: TrainConfig,
    reward_cfg: RewardConfig,
    distill_cfg: DistillConfig | None = None,
    switch_cfg: SwitchConfig | None = None,
    seed: int,
    episodes: int,
    tpm_reference: list | None = None,
) -> T3Result:
    """Train/measure/test loop across all episodes after a shift.

    With a teacher backend and a positive measurement window this is the full
    hybrid protocol. Degenerate settings reduce it exactly: ``t_m == 0`` with
    a teacher is pure distillation-trained student; ``t_m == 0`` without a
    teacher is the plain student (pure TD); ``t_m`` equal to the whole
    episode is the pure teacher protocol (no training time remains, so the
    switch is pinned off).
    """
    if switch_cfg is None:
        switch_cfg = SwitchConfig(t_m=0 if backend is None else 24)
    if distill_cfg is None:
        distill_cfg = (DistillConfig(td_weight=1.0, kd_weight=0.0) if backend is None
                       else DistillConfig())
    ttis_per_episode = sim_cfg.tti_per_episode
    if switch_cfg.t_m > ttis_per_episode:
        raise ValueError("measurement window exceeds the episode length")
    if backend is None:
        if switch_cfg.t_m != 0:
            raise ValueError("measurement without a teacher backend is meaningless")
        if distill_cfg.kd_weight != 0:
            raise ValueError("teacher-matching weight needs a teacher backend")
    if backend is not None and instruction is None:
        raise ValueError("a teacher backend needs an instruction")

    pure_student = switch_cfg.t_m == 0
    pure_teacher = backend is not None and switch_cfg.t_m == ttis_per_episode
    student_label = "npm" if backend is None else "t2npm"

    params = initial_params.copy()
    target_params = initial_params.copy()
    opt_state = make_optimizer_state(train_cfg, params)
    replay = ReplayMemory(train_cfg.replay_capacity)
    train_sim = ChannelSim(sim_cfg)

    teacher_replay = None
    cache = None
    if backend is not None and distill_cfg.kd_weight > 0:
        teacher_replay = TeacherReplay(sim_cfg.num_ues, capacity=train_cfg.replay_capacity)
        cache = TeacherCache(backend, instruction, distill_cfg.kappa)

    result = T3Result(params=params)
    state = None
    if not pure_student and not pure_teacher:
        state = SwitchState(switch_cfg.k)
        if tpm_reference is None:
            tpm_reference = measure_tpm_reference(
                sim_cfg, backend, instruction, seed,
                total_ttis=switch_cfg.total_measure_ttis)
        result.tpm_reference = list(tpm_reference)

    switched = pure_student
    for episode in range(episodes):
        # -- training phase ------------------------------------------------
        measuring = (not pure_teacher) and (not switched) and switch_cfg.t_m > 0
        train_ttis = 0 if pure_teacher else (
            ttis_per_episode - switch_cfg.t_m if measuring else ttis_per_episode)

        episode_loss = float("nan")
        epsilon = float("nan")
        if train_ttis >= train_cfg.ttis_per_step:
            grad_fn = None
            if cache is not None:
                grad_fn = make_composite_grad_fn(
                    cache, teacher_replay, train_cfg, distill_cfg,
                    kd_rng=substream(seed, "kd-sample", episode))
            logs = run_training_episode(
                train_sim, params, target_params, replay, train_cfg, reward_cfg, episode,
                arrivals_rng=substream(seed, "train-arrivals", episode),
                erasures_rng=substream(seed, "train-erasures", episode),
                explore_rng=substream(seed, "explore", episode),
                replay_rng=substream(seed, "replay", episode),
                opt_state=opt_state,
                ttis=train_ttis,
                grad_fn=grad_fn,
                state_sink=teacher_replay.push if teacher_replay is not None else None,
            )
            losses = [log.loss for log in logs if not math.isnan(log.loss)]
            episode_loss = float(np.mean(losses)) if losses else float("nan")
            epsilon = logs[0].epsilon if logs else float("nan")

        if measuring:
            samples = measure_goodput(
                params, sim_cfg, switch_cfg.t_m,
                arrivals_rng=substream(seed, "measure-arrivals", episode),
                erasures_rng=substream(seed, "measure-erasures", episode),
            )
            state.record(samples)
            if state.full:
                pooled = pool_measurements(state.ring, switch_cfg.k)
                u, p = mann_whitney_one_sided(result.tpm_reference, pooled)
                result.test_log.append((episode, u, p))
                if should_switch(p, switch_cfg.alpha):
                    state.latch(episode)
                    switched = True
                    result.switch_episode = episode

        # -- testing phase ---------------------------------------------------
        use_teacher = (backend is not None) and (not pure_student) \
            and (episode == 0 or not switched)
        if use_teacher:
            g = _test_episode_tpm(sim_cfg, backend, instruction, seed, episode,
                                  ttis_per_episode)
            result.protocols.append("tpm")
        else:
            g = _test_episode_student(sim_cfg, params, seed, episode, ttis_per_episode)
            result.protocols.append(student_label)
        result.goodputs.append(g)
        result.losses.append(episode_loss)
        result.epsilons.append(epsilon)
    return result


@dataclass
class SweepResult:
    rows: list                     # dicts: t_m, seed, switch_episode, meta_resilience
    means: dict                    # t_m -> mean meta-resilience over seeds
    best_t_m: int


def sweep_tm(
    sim_cfg: SimConfig,
    backend,
    instruction: Instruction,
    *,
    initial_params_fn,
    train_cfg: TrainConfig,
    reward_cfg: RewardConfig,
    distill_cfg: DistillConfig | None = None,
    grid=(0, 24, 48, 72, 96, 120, 144),
    seeds=(0, 1, 2, 3, 4),
    alpha: float = 0.05,
    episodes: int = 150,
    target_grid: TargetGrid | None = None,
) -> SweepResult:
    """Meta-resilience of the hybrid runner across measurement budgets.

    ``initial_params_fn(seed)`` supplies the starting network per seed so all
    budgets share identical initial conditions.
    """
    ttis = sim_cfg.tti_per_episode
    for t_m in grid:
        if t_m % MEASURE_WINDOW != 0 or not 0 <= t_m <= ttis:
            raise ValueError(f"grid value {t_m} invalid for {ttis}-TTI episodes")
    rows = []
    for t_m in grid:
        for seed in seeds:
            result = run_t3npm(
                sim_cfg, initial_params_fn(seed), backend, instruction,
                train_cfg=train_cfg, reward_cfg=reward_cfg, distill_cfg=distill_cfg,
                switch_cfg=SwitchConfig(t_m=t_m, alpha=alpha),
                seed=seed, episodes=episodes,
            )
            rows.append({
                "t_m": t_m,
                "seed": seed,
                "switch_episode": result.switch_episode,
                "meta_resilience": meta_resilience(result.goodputs, target_grid),
            })
    means = {
        t_m: float(np.mean([r["meta_resilience"] for r in rows if r["t_m"] == t_m]))
        for t_m in grid
    }
    best = max(means, key=lambda t: (means[t], -t))
    return SweepResult(rows=rows, means=means, best_t_m=best)
