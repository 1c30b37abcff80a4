"""Time-of-flight camera simulation and depth reconstruction."""

from .core import (C, CLIPPED, SINUSOID, CameraConfig, CameraFunction, ConfigError, DepthMap,
                   RangeError, ToFError, UnderdeterminedError, eval_camera_function,
                   fit_camera_function)
from .transient import CornerScene, SceneResponse, corner_two_bounce_response, single_bounce_response
from .simulate import NoiseLUT, RawFrames, build_noise_lut, correlate, sample_noise
from .reconstruct import (IncommensurateError, UnwrapConstants, run_pipeline, unwrap_crt,
                          unwrap_oracle)

__version__ = "0.1.0"
