"""Geometric visual servoing: SE(3) kinematics, port-Hamiltonian arm dynamics,
passivity-based control and optimal transport between depth clouds."""

from ._accel import backend_name
from .control import Gains, TargetState
from .lie import Pose, Twist, exp_twist, geodesic_distance, log_pose
from .port_hamiltonian import PhaseState, hamiltonian, integrate_step
from .robot import RobotModel, reference_robot
from .sim import RunConfig, load_config, run_servo, write_log
from .transport import DepthCloud, sinkhorn_unbalanced, wasserstein_distance

__version__ = "0.1.0"

__all__ = [
    "backend_name", "Gains", "TargetState", "Pose", "Twist", "exp_twist", "geodesic_distance", "log_pose",
    "PhaseState", "hamiltonian", "integrate_step", "RobotModel", "reference_robot", "RunConfig", "load_config",
    "run_servo", "write_log", "DepthCloud", "sinkhorn_unbalanced", "wasserstein_distance",
]
