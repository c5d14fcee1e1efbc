"""Word-level LSTM language models with injected thinking tokens."""

from .corpus import BatchedCorpus, Vocabulary, build_vocabulary, encode, load_corpus, make_batches
from .injector import LossMask, ThinkingTokenConfig, derive_loss_mask, inject, strip
from .model import HiddenState, ModelParams, forward_step, init_params, loss_and_grad, predict_distribution
from .checkpoint import load_checkpoint, save_checkpoint
from .trainer import TrainConfig, train
from .evaluation import masked_perplexity, rank_by_improvement, sentence_perplexities, word_probabilities

__version__ = "0.1.0"
