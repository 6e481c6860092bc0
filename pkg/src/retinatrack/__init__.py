"""Retinal-image eye tracking on a synthetic phantom.

Feature-based registration of small field-of-view retina frames, a canonical
feature space built by confidence-weighted bundle adjustment over a grid scan,
and per-frame gaze estimation against that space.
"""
from .canonical import CanonicalFeatureSpace, build_space, bundle_adjust, load_space, save_space
from .features import FeatureSet, extract
from .gaze import GazeEstimate, TrackerConfig, track_frame, track_sequence
from .matching import ConsensusParams
from .phantom import AppearanceParams, Calibration, Frame, GazeAngle, generate_phantom, grid_scan, render_frame

__version__ = "0.1.0"
