"""CPU defect hunting by fuzzing a software proxy and replaying snapshots."""

__version__ = "0.1.0"
