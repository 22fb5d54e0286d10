"""Conditional GAN training with a central generator and temporary local discriminators."""

from .datamodel import (
    CenterDataset,
    CondGaussianMixture,
    LabelStore,
    labelstore_merge,
    labelstore_sample,
    mixture_weights,
    pdf_conditional,
    sample_conditional,
    support,
)
from .evalharness import MetricRow, energy_distance, eval_generator, run_method
from .federation import GeneratorNode, DiscriminatorNode, Scenario, run_scenario, run_task, snapshot
from .gancore import Discriminator, GanHyper, Generator

__version__ = "0.1.0"
