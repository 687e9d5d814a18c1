"""Few-shot named entity recognition by metric learning over prompted token representations.

Modules, bottom-up: ``corpus`` (CoNLL IO and label sets), ``episodes``
(N-way K-shot sampling), ``prompting`` (mask-reducible prompts),
``encoding`` (reference encoder and prompt fusion), ``gaussian_metric``
(Gaussian heads, KL distances, contrastive loss), ``training`` (AdamW loop and
checkpoints), ``evaluation`` (nearest-neighbour inference and micro-F1) and
``cli``.
"""

__version__ = "0.1.0"
