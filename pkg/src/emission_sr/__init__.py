"""x2 super-resolution of emission maps with quantile-transform and fine-tuning domain adaptation.

The package root stays free of heavy imports so the command-line entry point
can set thread limits before numpy loads; import the submodules directly::

    from emission_sr import core, quantile, network, training, metrics
"""

__version__ = "0.1.0"
