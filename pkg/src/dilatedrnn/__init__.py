"""Dilated recurrent neural networks in numpy, with path-length analysis of their graphs."""
from .cells import Cell, CellKind, CellState
from .errors import ConfigurationError, ConsistencyError, DimensionError, FormatError, NumericError
from .graph import ArchKind, ArchSpec, build_cyclic_graph, shortest_path_oracle
from .model import DilatedRnnModel, DilationSchedule, build_baseline, build_model, forward, forward_interleaved
from .numeric import Rng

__version__ = "0.1.0"
