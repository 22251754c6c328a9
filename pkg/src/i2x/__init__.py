"""i2x: structured explanations of CNN training dynamics.

The pipeline turns per-checkpoint saliency maps and confidences into
abstract prototypes, per-transition responsibility maps, and structured
explanation reports, and uses those to drive curated fine-tuning.
"""

__version__ = "0.1.0"
