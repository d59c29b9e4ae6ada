"""Meta-reinforcement-learning intraday trading with mined run patterns."""

from .agent import AgentConfig, LSTMPolicy
from .config import Config, ConfigError, load_config
from .env import BUY, HOLD, SELL, ExitRule, TradingEnv, exit_scan
from .harness import ExperimentConfig, ResultTable, run_experiment, run_grid
from .ingest import DataError, Episode, load_csv, prepare
from .miner import FactBase, Pattern, PatternMiner, mine
from .patterns import HandcraftedPatterns
from .ranker import PatternRanker
from .synth import SynthSpec, generate_synthetic
from .trainer import PpoHyper, RecurrentPPOAgent

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "LSTMPolicy", "Config", "ConfigError", "load_config", "BUY", "HOLD", "SELL",
    "ExitRule", "TradingEnv", "exit_scan", "ExperimentConfig", "ResultTable", "run_experiment",
    "run_grid", "DataError", "Episode", "load_csv", "prepare", "FactBase", "Pattern",
    "PatternMiner", "mine", "HandcraftedPatterns", "PatternRanker", "SynthSpec",
    "generate_synthetic", "PpoHyper", "RecurrentPPOAgent",
]
