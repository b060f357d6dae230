"""Multi-expert visual feature routing plus a hallucination benchmark harness.

The package has two halves that meet in the middle:

* a routing pipeline (``experts``, ``router``, ``fusion``, ``numerics``) that
  encodes an image with several toy expert encoders, picks a weighted blend of
  them from a context vector, and merges the blend back into the base patch
  features;
* a benchmark harness (``benchmark``, ``evaluator``, ``metrics``, ``datagen``)
  that builds ten-category hallucination datasets over synthetic scenes, judges
  caption pairs by perplexity, and aggregates standard yes/no metrics.

``cli`` exposes both halves as subcommands.
"""

__version__ = "0.1.0"
