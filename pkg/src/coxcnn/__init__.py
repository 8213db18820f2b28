"""Cox proportional-hazards CNN with spatial pyramid pooling, plus a linear CPH baseline."""

from .cox import SurvivalRecord, cox_loss_gradient, neg_log_partial_likelihood
from .evaluation import c_index, cross_validate, make_folds
from .model import CoxCnnConfig, CoxCnnModel, build, load_model, predict_risks, save_model, train
from .simdata import simulate, synth_digits
from .spp import BoundingBox, SppConfig

__version__ = "0.1.0"
