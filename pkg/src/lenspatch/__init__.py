"""Optical dot-perturbation attacks on camera-based perception, at desk scale."""

from .attack import ALL, AttackConfig, PerturbationRecord, craft_uap, greedy_init, refine
from .defenses import DefenseConfig, eval_defense, feature_squeeze, input_randomize
from .imaging import MetricReport, compare, perceptual_distance, psnr, ssim
from .optics import BackgroundPool, EnvRanges, EnvSample, OpticsConfig, compose_frame, oracle_cdtf, transform_scene
from .perturb import DotParams, DotSpec, render, render_grad
from .serving import PerturbDB, SignMap, eval_asr, sample_routes, simulate_route, transfer_eval
from .surrogate import PairDataset, SurrogateModel, eval_surrogate, gen_pairs, train_surrogate
from .victim import SignWorld, VictimModel, gen_sign_dataset, train_classifier, train_detector

__version__ = "0.1.0"
