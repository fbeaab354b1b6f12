"""Kill, wait and OS-assisted suspend/resume as task preemption primitives."""

__version__ = "0.1.0"
