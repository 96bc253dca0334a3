"""fsids: few-shot intrusion detection with self-supervised pretraining.

Three-phase pipeline: contrastive mutual-information pretraining of a conv
encoder, episodic prototypical-network training, and a random forest over the
resulting embeddings.  See README.md for the CLI and the acceptance suite.
"""

__version__ = "0.1.0"
