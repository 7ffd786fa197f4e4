from .config import CellTemplate, ConfigFileError, GenerationConfig, ToyTaskConfig, interpolate, load_yaml
from .report import (KINDS, RadarLayout, ReportError, aggregate, emit_bar, emit_contact_sheet, emit_line, emit_radar,
                     emit_report, emit_table)
from .sweep import (DEFAULT_AXES, GUIDANCE_AXIS, SHOTS_AXIS, VOLUME_AXIS, RunRecord, SweepResult, SweepSpec,
                    config_hash, read_records, run_sweep)
