"""Experiment orchestration: scenarios around an environmental shift, result
records, file emission, and the shift-comparison table.

A scenario pretrains the student network in a *pre-shift* environment,
applies declared parameter deltas (the shift), adapts the network structure
if the UE count changed, then runs one protocol for a fixed episode budget in
the shifted environment. Every random draw descends from the scenario seed
through named substreams, so a rerun reproduces output files byte for byte.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .baseline import SAlohaConfig, run_saloha_episode, saloha_series
from .distill import DistillConfig
from .env import ChannelSim, RewardConfig, SimConfig, bler_from_snr, goodput
from .metrics import TargetGrid, meta_resilience, resilience_curve
from .npm import (
    NetworkShape,
    NpmParams,
    expand_for_ue_count,
    init_params,
    shrink_for_ue_count,
)
from .rng import substream
from .switch import (
    SwitchConfig,
    T3Result,
    run_t3npm,
    run_tpm_series,
    _test_episode_student,
)
from .teacher import FixtureBackend, Instruction, RemoteBackend, RemoteConfig, ScriptedOracle
from .train import TrainConfig, run_training_episode, run_greedy_episode
from .train import ReplayMemory, make_optimizer_state

__all__ = [
    "PROTOCOLS",
    "TeacherSpec",
    "ShiftSpec",
    "Scenario",
    "RunRecord",
    "build_teacher_backend",
    "resolve_instruction",
    "pretrain_base_params",
    "adapt_params",
    "run_scenario",
    "run_scenarios",
    "table1_matrix",
    "TABLE1_SHIFTS",
    "emit_results",
    "emit_curve",
    "scenario_to_dict",
    "scenario_from_dict",
    "load_scenario",
    "save_scenario",
]

logger = logging.getLogger(__name__)

PROTOCOLS = ("saloha", "npm-frozen", "npm", "tpm", "t2npm", "t3npm")

CSV_HEADER = ("episode", "protocol", "goodput", "loss", "epsilon", "switched")

CONFIG_VERSION = 1


@dataclass
class TeacherSpec:
    """How to build the text-teacher backend for a run.

    ``scripted`` needs no network: a rule policy behind the same text
    interface, with a seeded per-state answer-corruption rate emulating an
    imperfect language model. The teacher seed is independent of scenario
    seeds (one model serves all runs).
    """

    kind: str = "scripted"
    confidence: float = 0.8
    miss_rate: float = 0.2
    seed: int = 0
    base_url: str = ""
    model: str = ""
    token_env: str = "MACLAB_API_TOKEN"
    fixture_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("scripted", "remote", "fixture"):
            raise ValueError(f"unknown teacher kind {self.kind!r}")


def resolve_instruction(selector: str) -> Instruction:
    """``default``/``seed`` name the packaged instructions; anything else is
    read as a text file path."""
    if selector == "default":
        return Instruction.default()
    if selector == "seed":
        return Instruction.seed()
    from pathlib import Path

    path = Path(selector)
    return Instruction(text=path.read_text(encoding="utf-8"), tag=path.stem)


def build_teacher_backend(spec: TeacherSpec):
    if spec.kind == "scripted":
        return ScriptedOracle(confidence=spec.confidence, miss_rate=spec.miss_rate,
                              seed=spec.seed)
    if spec.kind == "remote":
        if not spec.base_url or not spec.model:
            raise ValueError("remote teacher needs base_url and model")
        return RemoteBackend(RemoteConfig(base_url=spec.base_url, model=spec.model,
                                          token_env=spec.token_env))
    if not spec.fixture_path:
        raise ValueError("fixture teacher needs fixture_path")
    return FixtureBackend(spec.fixture_path)


@dataclass
class ShiftSpec:
    """Declared post-shift deltas; unset fields keep their pre-shift values.

    ``snr_db`` is an alternative way to set the erasure probability through
    the sigmoid block-error curve; it conflicts with a direct
    ``erasure_prob``.
    """

    num_ues: int | None = None
    arrival_prob: float | None = None
    buffer_cap: int | None = None
    erasure_prob: float | None = None
    snr_db: float | None = None

    def __post_init__(self):
        if self.erasure_prob is not None and self.snr_db is not None:
            raise ValueError("give erasure_prob or snr_db, not both")

    def apply(self, pre: SimConfig) -> SimConfig:
        changes = {}
        if self.num_ues is not None:
            changes["num_ues"] = self.num_ues
            # scalar-broadcastable fields must be re-broadcast to the new count
            for name in ("arrival_prob", "buffer_cap", "erasure_prob"):
                values = set(getattr(pre, name))
                if len(values) != 1:
                    raise ValueError(f"cannot resize heterogeneous {name} automatically")
                changes[name] = values.pop()
        if self.arrival_prob is not None:
            changes["arrival_prob"] = self.arrival_prob
        if self.buffer_cap is not None:
            changes["buffer_cap"] = self.buffer_cap
        if self.erasure_prob is not None:
            changes["erasure_prob"] = self.erasure_prob
        if self.snr_db is not None:
            changes["erasure_prob"] = bler_from_snr(self.snr_db)
        if not changes:
            return replace(pre)
        return replace(pre, **changes)


@dataclass
class Scenario:
    """One end-to-end experiment: pretrain, shift, run a protocol."""

    name: str = "default"
    protocol: str = "npm"
    pre: SimConfig = field(default_factory=lambda: SimConfig(num_ues=2))
    shift: ShiftSpec = field(default_factory=lambda: ShiftSpec(num_ues=3))
    episodes: int = 150
    shift_episode: int = 0
    pretrain_episodes: int = 150
    seed: int = 0
    shape: NetworkShape = field(default_factory=NetworkShape)
    # Scenario runs default to Adam: the fixed-rate SGD that is fine for
    # pre-shift pretraining recovers slowly and unevenly after a UE-count
    # shift, where gradient scales differ wildly between the rebuilt shared
    # net and the preserved per-UE nets.
    train: TrainConfig = field(default_factory=lambda: TrainConfig(optimizer="adam"))
    reward: RewardConfig = field(default_factory=RewardConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    switch: SwitchConfig = field(default_factory=SwitchConfig)
    saloha: SAlohaConfig = field(default_factory=SAlohaConfig)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    instruction: str = "default"

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not 0 <= self.shift_episode < self.episodes:
            raise ValueError("shift_episode must lie inside the episode budget")
        if self.pretrain_episodes < 0:
            raise ValueError("pretrain_episodes must be >= 0")

    @property
    def post(self) -> SimConfig:
        return self.shift.apply(self.pre)


@dataclass
class RunRecord:
    """Per-episode rows plus summary statistics for one (scenario, seed)."""

    scenario: str
    protocol: str
    seed: int
    rows: list                  # (episode, protocol_in_use, goodput, loss, eps, switched)
    goodputs: list
    meta_resilience: float
    switch_episode: int | None
    wall_time_s: float

    def summary(self) -> dict:
        return {
            "scenario": self.scenario,
            "protocol": self.protocol,
            "seed": self.seed,
            "episodes": len(self.rows),
            "mean_goodput": float(np.mean(self.goodputs)),
            "meta_resilience": self.meta_resilience,
            "switch_episode": self.switch_episode,
            "wall_time_s": self.wall_time_s,
        }


def pretrain_base_params(
    pre_cfg: SimConfig,
    train_cfg: TrainConfig,
    reward_cfg: RewardConfig,
    *,
    seed: int,
    episodes: int,
    shape: NetworkShape | None = None,
) -> NpmParams:
    """Plain TD training in the pre-shift environment, from random init.

    This is the parameter set every learned protocol starts from when the
    shift hits.
    """
    shape = shape or NetworkShape()
    params = init_params(shape, pre_cfg.num_ues, pre_cfg.buffer_cap,
                         substream(seed, "init"))
    target = params.copy()
    replay = ReplayMemory(train_cfg.replay_capacity)
    opt_state = make_optimizer_state(train_cfg, params)
    sim = ChannelSim(pre_cfg)
    for episode in range(episodes):
        run_training_episode(
            sim, params, target, replay, train_cfg, reward_cfg, episode,
            arrivals_rng=substream(seed, "pretrain-arrivals", episode),
            erasures_rng=substream(seed, "pretrain-erasures", episode),
            explore_rng=substream(seed, "pretrain-explore", episode),
            replay_rng=substream(seed, "pretrain-replay", episode),
            opt_state=opt_state,
        )
    return params


def adapt_params(params: NpmParams, post_cfg: SimConfig, seed: int) -> NpmParams:
    """Structural adaptation to a changed UE count; identity otherwise.

    Growth keeps every pretrained weight and adds randomly initialized
    components for the new UE; shrinkage drops the removed UE's components.
    Buffer-capacity changes need no adaptation because observation encoders
    clamp counts into their trained range.
    """
    if post_cfg.num_ues == params.num_ues:
        return params.copy()
    if post_cfg.num_ues > params.num_ues:
        return expand_for_ue_count(params, post_cfg.num_ues, substream(seed, "expand-init"))
    return shrink_for_ue_count(params, post_cfg.num_ues, substream(seed, "expand-init"))


def _frozen_series(post_cfg: SimConfig, params: NpmParams, seed: int, episodes: int) -> T3Result:
    result = T3Result(params=params)
    for episode in range(episodes):
        g = _test_episode_student(post_cfg, params, seed, episode, post_cfg.tti_per_episode)
        result.goodputs.append(g)
        result.losses.append(float("nan"))
        result.epsilons.append(float("nan"))
        result.protocols.append("npm-frozen")
    return result


def _preshift_rows(scenario: Scenario, params: NpmParams | None, backend, instruction):
    """Episodes before the shift: the pretrained system in its home
    environment, no training."""
    rows = []
    pre = scenario.pre
    for episode in range(scenario.shift_episode):
        arrivals = substream(scenario.seed, "preshift-arrivals", episode)
        erasures = substream(scenario.seed, "preshift-erasures", episode)
        if scenario.protocol == "saloha":
            sim = ChannelSim(pre, remove_on_decode=scenario.saloha.discard_mode == "instant")
            flags = run_saloha_episode(
                sim, scenario.saloha, pre.tti_per_episode,
                arrivals_rng=arrivals, erasures_rng=erasures,
                policy_rng=substream(scenario.seed, "preshift-policy", episode))
            label = "saloha"
        elif scenario.protocol == "tpm":
            sim = ChannelSim(pre)
            from .teacher import run_tpm_episode
            flags = run_tpm_episode(sim, backend, instruction, pre.tti_per_episode,
                                    arrivals_rng=arrivals, erasures_rng=erasures)
            label = "tpm"
        else:
            sim = ChannelSim(pre)
            flags = run_greedy_episode(sim, params, pre.tti_per_episode,
                                       arrivals_rng=arrivals, erasures_rng=erasures)
            label = "npm"
        rows.append((episode, label, goodput(flags), float("nan"), float("nan"), 0))
    return rows


def run_scenario(scenario: Scenario, *, pretrained: NpmParams | None = None) -> RunRecord:
    """Execute one scenario for its seed; deterministic given the scenario.

    ``pretrained`` short-circuits the pre-shift training stage (callers that
    run many protocols over one seed reuse the same base parameters).
    """
    start = time.perf_counter()
    pre_cfg = scenario.pre
    post_cfg = scenario.post
    needs_params = scenario.protocol in ("npm-frozen", "npm", "t2npm", "t3npm")
    needs_teacher = scenario.protocol in ("tpm", "t2npm", "t3npm")

    backend = build_teacher_backend(scenario.teacher) if needs_teacher else None
    instruction = resolve_instruction(scenario.instruction) if needs_teacher else None

    params = None
    needs_preshift_params = (scenario.shift_episode > 0
                             and scenario.protocol not in ("saloha", "tpm"))
    if needs_params or needs_preshift_params:
        base = pretrained if pretrained is not None else pretrain_base_params(
            pre_cfg, scenario.train, scenario.reward,
            seed=scenario.seed, episodes=scenario.pretrain_episodes, shape=scenario.shape)
        params = adapt_params(base, post_cfg, scenario.seed)
        preshift_params = base
    else:
        preshift_params = None

    rows = _preshift_rows(scenario, preshift_params, backend, instruction)
    post_episodes = scenario.episodes - scenario.shift_episode

    if scenario.protocol == "saloha":
        series = saloha_series(post_cfg, scenario.saloha, seed=scenario.seed,
                               episodes=post_episodes)
        result = T3Result(goodputs=list(series),
                          losses=[float("nan")] * post_episodes,
                          epsilons=[float("nan")] * post_episodes,
                          protocols=["saloha"] * post_episodes)
    elif scenario.protocol == "npm-frozen":
        result = _frozen_series(post_cfg, params, scenario.seed, post_episodes)
    elif scenario.protocol == "tpm":
        result = run_tpm_series(post_cfg, backend, instruction,
                                seed=scenario.seed, episodes=post_episodes)
    elif scenario.protocol == "npm":
        result = run_t3npm(
            post_cfg, params, None, None,
            train_cfg=scenario.train, reward_cfg=scenario.reward,
            distill_cfg=DistillConfig(td_weight=1.0, kd_weight=0.0),
            switch_cfg=SwitchConfig(t_m=0),
            seed=scenario.seed, episodes=post_episodes)
    elif scenario.protocol == "t2npm":
        result = run_t3npm(
            post_cfg, params, backend, instruction,
            train_cfg=scenario.train, reward_cfg=scenario.reward,
            distill_cfg=scenario.distill, switch_cfg=SwitchConfig(t_m=0),
            seed=scenario.seed, episodes=post_episodes)
    else:  # t3npm
        result = run_t3npm(
            post_cfg, params, backend, instruction,
            train_cfg=scenario.train, reward_cfg=scenario.reward,
            distill_cfg=scenario.distill, switch_cfg=scenario.switch,
            seed=scenario.seed, episodes=post_episodes)

    switch_episode = result.switch_episode
    for j in range(post_episodes):
        episode = scenario.shift_episode + j
        switched = 1 if (switch_episode is not None and j >= switch_episode) else 0
        rows.append((episode, result.protocols[j], result.goodputs[j],
                     result.losses[j], result.epsilons[j], switched))

    goodputs = [row[2] for row in rows]
    record = RunRecord(
        scenario=scenario.name,
        protocol=scenario.protocol,
        seed=scenario.seed,
        rows=rows,
        goodputs=goodputs,
        meta_resilience=meta_resilience(goodputs),
        switch_episode=switch_episode,
        wall_time_s=time.perf_counter() - start,
    )
    return record


def _run_scenario_worker(scenario: Scenario) -> RunRecord:
    return run_scenario(scenario)


def run_scenarios(scenarios, max_workers: int | None = None) -> list:
    """Run many scenarios, optionally on a process pool; results come back
    ordered like the input regardless of completion order."""
    scenarios = list(scenarios)
    if max_workers is None or max_workers <= 1 or len(scenarios) <= 1:
        return [run_scenario(s) for s in scenarios]
    with ProcessPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(_run_scenario_worker, scenarios))


# --- the shift-comparison table --------------------------------------------

TABLE1_SHIFTS = {
    "pa_up": ShiftSpec(arrival_prob=0.5),
    "pa_down": ShiftSpec(arrival_prob=0.1),
    "bmax_up": ShiftSpec(buffer_cap=5),
    "bmax_down": ShiftSpec(buffer_cap=2),
    "pe_up": ShiftSpec(erasure_prob=0.1),
    "pe_down": ShiftSpec(erasure_prob=0.001),
    "L_up": ShiftSpec(num_ues=3),
    "L_down": ShiftSpec(num_ues=1),
}


def table1_matrix(
    seeds,
    *,
    columns=None,
    base: Scenario | None = None,
    tail_episodes: int = 20,
) -> dict:
    """Goodput comparison across environmental shifts.

    For every shift column: the frozen pretrained network (structurally
    adapted but not retrained), the retrained network (scored over its final
    ``tail_episodes``), and the fixed-probability baseline. One pretraining
    run per seed is shared by all columns.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds for a stable table")
    base = base or Scenario()
    if columns is None:
        columns = list(TABLE1_SHIFTS)
    unknown = [c for c in columns if c not in TABLE1_SHIFTS]
    if unknown:
        raise ValueError(f"unknown shift columns: {unknown}")

    pretrained = {
        seed: pretrain_base_params(base.pre, base.train, base.reward, seed=seed,
                                   episodes=base.pretrain_episodes, shape=base.shape)
        for seed in seeds
    }

    table = {}
    for column in columns:
        shift = TABLE1_SHIFTS[column]
        cells = {"saloha": [], "frozen": [], "retrained": []}
        for seed in seeds:
            frozen = run_scenario(
                replace(base, name=f"{column}-frozen", protocol="npm-frozen",
                        shift=shift, seed=seed),
                pretrained=pretrained[seed])
            retrained = run_scenario(
                replace(base, name=f"{column}-retrained", protocol="npm",
                        shift=shift, seed=seed),
                pretrained=pretrained[seed])
            saloha = run_scenario(
                replace(base, name=f"{column}-saloha", protocol="saloha",
                        shift=shift, seed=seed))
            cells["frozen"].append(float(np.mean(frozen.goodputs)))
            cells["retrained"].append(float(np.mean(retrained.goodputs[-tail_episodes:])))
            cells["saloha"].append(float(np.mean(saloha.goodputs)))
        table[column] = {
            "saloha": float(np.mean(cells["saloha"])),
            "frozen": float(np.mean(cells["frozen"])),
            "retrained": float(np.mean(cells["retrained"])),
            "gap": float(np.mean(cells["retrained"]) - np.mean(cells["frozen"])),
            "per_seed": cells,
        }
    return table


# --- emission ---------------------------------------------------------------

def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if np.isnan(value):
            return ""
        return repr(value)
    return str(value)


def emit_results(record: RunRecord, out_dir, *, plots: bool = False,
                 grid: TargetGrid | None = None) -> dict:
    """Write the per-episode CSV, summary JSON, and resilience-curve CSV.

    Returns the written paths. Plots are optional conveniences rendered from
    the same data; nothing downstream depends on them.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{record.scenario}_{record.protocol}_seed{record.seed}"
    paths = {}

    episodes_path = out / f"{stem}.csv"
    with open(episodes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for episode, protocol, g, loss, eps, switched in record.rows:
            writer.writerow([episode, protocol, _cell(float(g)), _cell(loss),
                             _cell(eps), switched])
    paths["episodes"] = episodes_path

    summary_path = out / f"{stem}_summary.json"
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(record.summary(), fh, indent=1)
    paths["summary"] = summary_path

    curve_path = out / f"{stem}_curve.csv"
    emit_curve(record.goodputs, curve_path, grid=grid)
    paths["curve"] = curve_path

    if plots:
        try:
            paths.update(_plot_record(record, out, stem, grid))
        except ImportError:
            logger.warning("matplotlib unavailable; skipping plots")
    return paths


def emit_curve(goodputs, path, *, grid: TargetGrid | None = None) -> None:
    curve = resilience_curve(goodputs, grid)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(("target", "resilience"))
        for target, value in curve:
            writer.writerow([repr(target), repr(value)])


def _plot_record(record: RunRecord, out, stem: str, grid) -> dict:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = {}
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(record.goodputs)), record.goodputs, lw=1.2)
    if record.switch_episode is not None:
        ax.axvline(record.switch_episode, color="tab:red", ls="--", lw=1)
    ax.set_xlabel("episode")
    ax.set_ylabel("goodput")
    ax.set_title(f"{record.scenario} / {record.protocol} / seed {record.seed}")
    fig.tight_layout()
    goodput_path = out / f"{stem}_goodput.svg"
    fig.savefig(goodput_path)
    plt.close(fig)
    paths["goodput_plot"] = goodput_path

    curve = resilience_curve(record.goodputs, grid)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([g for g, _ in curve], [r for _, r in curve], lw=1.2)
    ax.set_xlabel("target goodput")
    ax.set_ylabel("resilience")
    ax.set_ylim(0, 1.05)
    fig.tight_layout()
    curve_plot = out / f"{stem}_resilience.svg"
    fig.savefig(curve_plot)
    plt.close(fig)
    paths["resilience_plot"] = curve_plot
    return paths


# --- config files -----------------------------------------------------------

def scenario_to_dict(scenario: Scenario) -> dict:
    data = {
        "version": CONFIG_VERSION,
        "name": scenario.name,
        "protocol": scenario.protocol,
        "episodes": scenario.episodes,
        "shift_episode": scenario.shift_episode,
        "pretrain_episodes": scenario.pretrain_episodes,
        "seed": scenario.seed,
        "pre": asdict(scenario.pre),
        "shift": asdict(scenario.shift),
        "shape": asdict(scenario.shape),
        "train": asdict(scenario.train),
        "reward": asdict(scenario.reward),
        "distill": asdict(scenario.distill),
        "switch": asdict(scenario.switch),
        "saloha": asdict(scenario.saloha),
        "teacher": asdict(scenario.teacher),
        "instruction": scenario.instruction,
    }
    return data


def scenario_from_dict(data: dict) -> Scenario:
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {version}")
    shape_data = dict(data.get("shape", {}))
    for key in ("ue_hidden", "bs_hidden", "head_hidden"):
        if key in shape_data:
            shape_data[key] = tuple(shape_data[key])
    return Scenario(
        name=data.get("name", "default"),
        protocol=data.get("protocol", "npm"),
        episodes=data.get("episodes", 150),
        shift_episode=data.get("shift_episode", 0),
        pretrain_episodes=data.get("pretrain_episodes", 150),
        seed=data.get("seed", 0),
        pre=SimConfig(**data.get("pre", {})),
        shift=ShiftSpec(**data.get("shift", {})),
        shape=NetworkShape(**shape_data),
        train=TrainConfig(**data.get("train", {})),
        reward=RewardConfig(**data.get("reward", {})),
        distill=DistillConfig(**data.get("distill", {})),
        switch=SwitchConfig(**data.get("switch", {})),
        saloha=SAlohaConfig(**data.get("saloha", {})),
        teacher=TeacherSpec(**data.get("teacher", {})),
        instruction=data.get("instruction", "default"),
    )


def save_scenario(scenario: Scenario, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scenario_to_dict(scenario), fh, indent=1)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return scenario_from_dict(json.load(fh))
