"""LSTM image-caption generator trained on fixed image feature vectors."""

from .datagen import CaptionedExample, SceneSpec, generate_dataset, load_dataset, save_dataset
from .inference import DecodeConfig, Hypothesis, beam_search, caption_log_prob, decode_greedy, decode_sample
from .model import ModelDims, ModelParams, backward_caption, forward_caption
from .training import SamplingSchedule, TrainConfig, train
from .vocab import Vocabulary, build_vocabulary, tokenize

__version__ = "0.1.0"
