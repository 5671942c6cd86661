"""Ping-Pong detection with an Auto-Cuckoo filter, plus a cache simulator and attacks."""

from .cachesim import CacheGeometry, CacheHierarchy, Level, LevelGeometry
from .filter import AutoCuckooFilter, FilterConfig, Status, theoretical_fpr
from .monitor import MonitorConfig, PiPoMonitor
from .system import Simulator

__all__ = [
    "AutoCuckooFilter",
    "CacheGeometry",
    "CacheHierarchy",
    "FilterConfig",
    "Level",
    "LevelGeometry",
    "MonitorConfig",
    "PiPoMonitor",
    "Simulator",
    "Status",
    "theoretical_fpr",
]

__version__ = "0.1.0"
