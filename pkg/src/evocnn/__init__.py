"""evocnn: evolutionary search over CNN architectures with a built-in trainer.

The package evolves convolutional architectures with a NEAT-style genetic
algorithm (graph-encoded genomes, structural mutations, speciation), trains
each candidate with its own SGD engine to obtain a fitness score, and ships
the surrounding tooling: x-ray-style image preprocessing, binary-classifier
diagnostics, and gradient-weighted class-activation heatmaps.
"""

__version__ = "0.1.0"
