"""Batch experiments, format comparison, live sessions, and the CLI."""

from .matrix import MatrixResult, run_matrix, summarize, write_csv
from .records import SessionRecord, append_record, read_records

__all__ = [
    "MatrixResult",
    "run_matrix",
    "summarize",
    "write_csv",
    "SessionRecord",
    "append_record",
    "read_records",
]
