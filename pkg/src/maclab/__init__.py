"""maclab: a discrete-time multiple-access protocol laboratory.

Uplink agents share one slotted channel. Four protocol families are
implemented and compared under environmental shifts:

- a fixed transmit-probability baseline (``baseline``),
- a trained network protocol driven by per-device Q-networks (``npm``),
- a teacher-driven protocol where a language model answers per-slot action
  queries over a text interface (``teacher``),
- hybrids that distill the teacher into the network while training and,
  optionally, monitor both and switch once the student statistically wins
  (``distill``, ``switch``).

``metrics`` scores runs by goodput and resilience, ``harness`` packages
end-to-end experiments, and ``cli`` exposes them as subcommands.
"""

from .env import (
    Action,
    ChannelSim,
    EnvState,
    RewardConfig,
    SimConfig,
    SlotResult,
    bler_from_snr,
    compute_rewards,
    goodput,
)
from .rng import substream
from .npm import (
    NetworkShape,
    NpmParams,
    expand_for_ue_count,
    forward_batch,
    greedy_actions,
    init_params,
    load_params,
    pipeline_forward,
    save_params,
    select_action,
    shrink_for_ue_count,
)
from .train import (
    Experience,
    ReplayMemory,
    TrainConfig,
    epsilon_at,
    run_greedy_episode,
    run_training_episode,
    soft_update,
    td_loss_and_grads,
)
from .teacher import (
    Instruction,
    RemoteBackend,
    RemoteConfig,
    ScriptedOracle,
    TeacherTransportError,
    TpmDecision,
    build_queries,
    parse_actions,
    run_tpm_episode,
    tpm_step,
)
from .distill import (
    DistillConfig,
    TeacherCache,
    TeacherReplay,
    composite_loss_and_grads,
    kd_loss,
    soft_distributions,
)
from .promptopt import optimize_instruction, select_best
from .metrics import TargetGrid, meta_resilience, resilience, resilience_curve
from .switch import (
    SwitchConfig,
    T3Result,
    mann_whitney_one_sided,
    measure_goodput,
    run_t3npm,
    run_tpm_series,
    should_switch,
    sweep_tm,
)
from .baseline import SAlohaConfig, run_saloha_episode, saloha_series
from .harness import (
    RunRecord,
    Scenario,
    ShiftSpec,
    TeacherSpec,
    emit_results,
    run_scenario,
    table1_matrix,
)

__version__ = "0.1.0"
