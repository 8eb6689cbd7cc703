"""Simulation and bounds for the Peierls contour gas viewed as a loss network."""

__version__ = "0.1.0"

from .lattice import (BudgetExceeded, Contour, ContourCatalog, ContourClass, NotClosed, NotConnected,
                      Plaquette, TailDiverges, TailModel, canonicalize, contour_count_tail,
                      enumerate_through, get_catalog, incompatible, validate_contour)
from .field import Cylinder, FieldRealization
from .forward import HorizonTooShort, Volume, regeneration_times, run_forward, stationary_forward_sample
from .clans import (Clan, ClanStats, HorizonExploded, TruncationWarning, classify_kept, clan_statistics,
                    explore_clan, finite_volume_clan, mixing_probe, perfect_sample)
from .branching import (BoundReport, Bounds, DomainError, PopulationExplosion, alpha, alpha0, beta_star,
                        bound_report, coupled_domination_check, offspring_mean, simulate_branching)
from .validation import ExactDistribution, ExperimentRecord, exact_gibbs, tv_distance
