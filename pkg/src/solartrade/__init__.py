"""Solar energy trading with a PPO agent, simple baselines and a mixture-of-experts price forecaster."""

from .agents import (
    PPOTrader,
    RandomPolicy,
    SellOnlyPolicy,
    clipped_surrogate,
    evaluate,
    gae,
    load_trader,
    ppo_loss,
    save_trader,
)
from .config import ExperimentConfig, load_config
from .data import Dataset, DayRecord, load_dataset, split_chronological, split_random, synth_dataset
from .env import HOLD, SELL, ObservationScaler, TradingEnv, compute_reward, exhaustive_optimum
from .exceptions import (
    ConfigurationError,
    ContractViolation,
    ParseError,
    SolarTradeError,
    TrainingDivergence,
    ValidationError,
)
from .experiment import emit_report, run_experiment
from .forecast import (
    BestDayTrader,
    MoEForecaster,
    MoENetwork,
    SolitonEmbedding,
    TableEmbedding,
    augment_long,
    gate_topk,
    load_forecaster,
    save_forecaster,
    train_moe,
)
from .nn import Mlp, adam_step, load_mlp, save_mlp

__version__ = "0.1.0"

__all__ = [
    "BestDayTrader", "ConfigurationError", "ContractViolation", "Dataset", "DayRecord",
    "ExperimentConfig", "HOLD", "Mlp", "MoEForecaster", "MoENetwork", "ObservationScaler",
    "PPOTrader", "ParseError", "RandomPolicy", "SELL", "SellOnlyPolicy", "SolarTradeError",
    "SolitonEmbedding", "TableEmbedding", "TradingEnv", "TrainingDivergence", "ValidationError",
    "adam_step", "augment_long", "clipped_surrogate", "compute_reward", "emit_report", "evaluate",
    "exhaustive_optimum", "gae", "gate_topk", "load_config", "load_dataset", "load_forecaster",
    "load_mlp", "load_trader", "ppo_loss", "run_experiment", "save_forecaster", "save_mlp",
    "save_trader", "split_chronological", "split_random", "synth_dataset", "train_moe",
]
