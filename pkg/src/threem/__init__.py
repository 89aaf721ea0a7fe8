"""Multi-style image captioning with a dual-branch (caption + visual) top-down attention decoder."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .corpus import StyleVocabulary, Vocabulary, build_vocab, load_dataset
from .errors import ContractError, DataError, DimensionError, NumericError, ParameterError, ThreeMError
from .inference import PenaltyConfig, beam_search, greedy_decode
from .metrics import EvalCorpus, report
from .model import ModelConfig, MultiUpDown
from .trainer import TrainConfig, fit, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
