"""Traffic speed forecasting with a graph-convolutional GRU encoder-decoder.

Pure numpy: a small reverse-mode autodiff tape (:mod:`stgcast.tensor`), graph
preprocessing, models, training, data pipeline, evaluation and a CLI.
"""

__version__ = "0.1.0"
