"""Rewards, matching and GRPO utilities for two-pass reasoning segmentation."""

__version__ = "0.1.0"
