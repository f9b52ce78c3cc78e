"""Pose-feature distillation toolkit.

Teacher pathways over 2D joints, a distilled RGB+flow student, and the
downstream recognition / alignment / detection heads, all verifiable against
a synthetic articulated-figure oracle with known ground-truth pose.
"""

__version__ = "0.1.0"
