"""Real-time segmentation quality control: per-class Dice regression for 3D cardiac labelmaps."""

__version__ = "0.1.0"

CLASS_NAMES = ("bg", "lvc", "lvm", "rvc", "wh")
