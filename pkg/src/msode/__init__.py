"""Multi-scale neural-ODE 3D image registration toolkit."""

from .volume import (DeformationField, NumericsError, Volume3D, build_pyramid,  # noqa: F401
                     downsample2x, identity_field, read_mv01, spatial_gradient,
                     trilinear_sample, warp, write_mv01)
from .transforms import (BSplineGrid, DenseParams, HybridParams, Rigid6,  # noqa: F401
                         TransformParams, bspline_to_field, compose, dense_to_field,
                         flatten_params, identity_params, rigid_to_field, to_field,
                         unflatten_params)
from .odecore import (OdeTrace, SolverSchedule, SolverSpec, euler_solve,  # noqa: F401
                      heun_adaptive_solve, loss_gradient, msodenet_forward,
                      parse_schedule)
from .dynamics import DynamicsStack  # noqa: F401
from .losses import (RegLossWeights, mutual_information, self_supervision_loss,  # noqa: F401
                     similarity_loss, smoothness_loss, total_registration_loss)
from .synth import MotionSpec, PhantomSpec, generate_dataset, read_dataset  # noqa: F401
from .evalm import benchmark, dice, rmse_field, rmse_image  # noqa: F401
from .train_reg import RegModel, RegTrainConfig, train_registration  # noqa: F401

__version__ = "0.1.0"
