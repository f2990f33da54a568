"""dqlab: measurement-based dq-frame admittance identification of a
grid-following inverter, rational fitting, and weak-grid stability screening.
"""

from .simcore import OMEGA0, SimConfig, SimState, Snapshot, Trace, park, inverse_park
from .plant import InverterParams, OperatingPoint
from .network import GridParams, InjectionSpec, scr_to_impedance, solve_operating_point
from .probe import MeasurementPLLConfig, apply_pll_correction, design_pll_gains
from .model import SystemModel, GridSwitch, settle, run_injected, run_free
from .sweep import SweepPlan, plan_frequencies, execute_pair, run_sweep
from .extract import AdmittanceTable, PhasorSample, extract_phasor, build_table
from .vfit import RationalModel, vector_fit, auto_order_fit, realize_state_space
from .analytic import Equilibrium, find_equilibrium, linearize, oracle_admittance, freq_response
from .statespace import StateSpaceModel
from .stability import (
    GridImpedanceModel,
    StabilityVerdict,
    close_loop,
    grid_impedance_ss,
    scr_sweep,
    timedomain_stability_probe,
)

__version__ = "0.1.0"
