"""Cycle-level cost estimation for compute-near-memory systems."""

from .bench import BenchSpec, build_benchmark, parse_bench
from .cnmir import KernelIr, Subspace, build_kernel, emit_kernel, parse_kernel
from .codegen import lower_to_llvcnm, tile_plan
from .engine import (EstimationResult, EstimatorConfig, estimate_system, get_portion,
                     perf_estimate, remaining_space, simulate)
from .errors import (CnmError, DeadlockError, IngestError, IsaError, KernelError, LoweringError,
                     MappingError, ParseError, SimulationError, TargetError)
from .ingest import categories, ingest_target_asm
from .isa import (DataType, Instruction, Loop, Opcode, Program, build_program, emit_program,
                  flatten, parse_program, validate_program)
from .mapping import (Map, MappingSet, emit_mapping, enumerate_mappings, parse_mapping, partition,
                      reduction_plan, sample_mappings, trivial_mapping, validate_mapping)
from .target import (TargetSpec, apply_overrides, emit_target, list_presets, load_target,
                     load_target_file, preset)

__version__ = "0.1.0"
