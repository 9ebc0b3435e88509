"""Food-defect detection data tooling: BBoxMixUp, CGPC and a mean-teacher simulator."""

__version__ = "0.1.0"
