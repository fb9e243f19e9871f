"""Light field disparity estimation by shifting epipolar plane image stacks."""

__version__ = "0.1.0"
