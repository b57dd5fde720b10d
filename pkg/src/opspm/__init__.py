"""Single-particle battery model, neural-operator surrogates, and Bayesian identification."""

from .params import (CellParameters, ElectrodeParams, FluxSign, OcpCurve, PhysicalConstants,
                     chen_nmc_cell, eval_ocp, prada_lfp_cell, soc_to_stoichiometry)
from .solver import (ConcentrationState, Field2D, RadialGrid, SimulationResult,
                     SingularOverpotentialError, domain_violated, exchange_term, simulate,
                     step_diffusion, surface_flux, terminal_voltage)
from .excitation import (CellInstance, CurrentProfile, Family, FamilyConfig,
                         gen_cc, gen_grf, gen_profile, gen_pulse, gen_tri,
                         kernel_per, sample_parameters)
from .training import (Dataset, DatasetConfig, MetricsReport, Sample, SurrogateModel,
                       TrainConfig, evaluate_metrics, generate_dataset, loss_nl2,
                       normalize, denormalize, train)
from .bayesopt import (GpModel, IdentifyTrace, ReferenceForward, SearchDomain,
                       SurrogateForward, expected_improvement, gp_fit, identify,
                       propose_next, voltage_objective)

__version__ = "0.1.0"
