"""Longitudinal CT registration and tumour response quantification."""
from .analysis import (LesionMatch, LesionSet, RoiJacobianStats, SubSegmentation,
                       connected_components, dice, fcm_subsegment, match_lesions,
                       percent_volume_change, roi_jacobian_stats, sdlogj)
from .loss import LossConfig, NumericalError, loss_gradient, total_loss
from .nifti import load_field, load_nifti, save_nifti
from .phantom import AnalyticDeformation, LesionSpec, PhantomPair, PhantomSpec, make_pair
from .registrar import RegistrationConfig, RegistrationResult, RegistrationUnit, register
from .transform import (DisplacementField, JacobianMap, compose, jacobian_determinant,
                        warp)
from .volume import Grid3, LabelMask, Volume3

__version__ = "0.1.0"
