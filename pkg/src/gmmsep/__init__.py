"""Class-conditional embedding networks for music source separation."""

from .classgmm import (CovarianceType, GaussianParams, fit_single_gaussian, likelihood_mask,
                       posterior_mask, soft_kmeans_mask)
from .datagen import (MixtureSpec, StemBank, generate_manifest, read_manifest, render_mixture,
                      synth_stem, synthetic_bank, write_manifest)
from .dsp import AudioClip, ComplexSpectrogram, StftConfig, istft, stft
from .evaluation import ablation_report, evaluate_testset, sdr
from .separator import embedding_views, export_embedding_views, query_separate, separate
from .system import FrontEnd, SeparationModel, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, desk_config, fit
from .wavio import read_wav, write_wav

__version__ = "0.1.0"
