"""Bit-accurate simulator and cycle/power model of a low-power LSTM accelerator tile
and its systolic composition."""

from .fxp import DEFAULT_FORMATS, Formats, FxFormat, Q1_6, Q2_5, ACC_11
from .lstm_ref import BlockOrder, CANONICAL_ORDER, LstmLayerParams, LstmState
from .modelio import NetworkModel, ctc_3l_421h_uni, load_network, quantize_model, random_network
from .perfmodel import CycleParams, OPERATING_POINTS, op_count, report, simulate_cycles
from .systolic import ArrayGeometry, SystolicArray, build_array, build_schedule, partition
from .tile import Tile, TileConfig

__version__ = "0.1.0"

__all__ = [
    "ACC_11", "ArrayGeometry", "BlockOrder", "CANONICAL_ORDER", "CycleParams", "DEFAULT_FORMATS",
    "Formats", "FxFormat", "LstmLayerParams", "LstmState", "NetworkModel", "OPERATING_POINTS",
    "Q1_6", "Q2_5", "SystolicArray", "Tile", "TileConfig", "build_array", "build_schedule",
    "ctc_3l_421h_uni", "load_network", "op_count", "partition", "quantize_model",
    "random_network", "report", "simulate_cycles",
]
