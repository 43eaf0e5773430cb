"""Reflected Brownian motion in smooth domains: simulation, excursion ladders
and the derivative of the stochastic flow with respect to the starting point."""
from .geometry import (
    Ball,
    Domain,
    Ellipsoid,
    Halfspace,
    boundary_project,
    exp_shape,
    inward_normal,
    parse_domain,
    shape_operator,
    tangent_projector,
)
from .rbm_sim import DrivingNoise, ReflectedPath, inverse_local_time, run_flows, simulate_flow, simulate_path
from .excursion import ExcursionLadder, ExcursionRecord, build_ladder, decompose
from .derivative import curvature_product_2d, multiplicative_functional, rank_profile
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"
