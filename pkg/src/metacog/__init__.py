"""Metacognitive control: STL-monitored low-level RL with safe reward adaptation."""

__version__ = "0.1.0"
