"""gaitforge: gait-recognition model family (DeepGaitV2 / SwinGait variants).

Thin Python surface over the C++ core: silhouette normalization, the
synthetic walker corpus, dumb-patch analysis, architecture accounting,
and model build / train / embed / evaluate.
"""

try:
    from ._gaitforge import (
        GaitforgeError,
        Model,
        dumb_patch_fraction,
        evaluate,
        inspect,
        normalize_silhouette,
        shuffle_ablation,
        synth_corpus,
        synth_walker,
        train,
    )
except ImportError:  # in-tree use: the module sits on sys.path (CMake build dir)
    from _gaitforge import (
        GaitforgeError,
        Model,
        dumb_patch_fraction,
        evaluate,
        inspect,
        normalize_silhouette,
        shuffle_ablation,
        synth_corpus,
        synth_walker,
        train,
    )

__version__ = "0.1.0"

__all__ = [
    "GaitforgeError",
    "Model",
    "dumb_patch_fraction",
    "evaluate",
    "inspect",
    "normalize_silhouette",
    "shuffle_ablation",
    "synth_corpus",
    "synth_walker",
    "train",
    "__version__",
]
