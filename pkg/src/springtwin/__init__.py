"""springtwin: spring-mass digital twins for deformable objects.

Fast spring-mass simulation with a differentiable rollout, two-stage inverse
parameter fitting from partial point-cloud observations, skinning-based
motion transfer, shooting-based planning, and a real-time interactive
simulation service.
"""

__version__ = "0.1.0"
