"""Dual-path RGB-D self-prompted instance segmentation."""
