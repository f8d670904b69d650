"""Point-level navigation planner: exact and learned distance features feeding a convex MPC."""

__version__ = "0.1.0"
