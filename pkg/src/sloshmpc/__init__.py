"""Anti-slosh assistive teleoperation of a planar 3R arm.

A receding-horizon controller blends operator-input tracking against
suppression of the liquid motion inside an open container carried by the
arm.  The package provides the models, the trajectory optimizer, a
closed-loop simulator, a batch CLI and a streaming teleoperation service.
"""

__version__ = "0.1.0"
