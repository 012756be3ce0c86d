"""Algebraic circuits for neurosymbolic inference and learning."""
from __future__ import annotations

import os as _os

# cap BLAS worker threads before numpy loads
_threads = _os.environ.get("DEEPLOG_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .algebra import get_structure, get_transformation  # noqa: E402
from .language import Atom, Formula, Model, Variable  # noqa: E402
from .parser import parse_formula, parse_model, print_formula, print_model  # noqa: E402
from .oracle import brute_force_wmc, evaluate  # noqa: E402
from .compiler import compile_formula, compile_roots, simplify  # noqa: E402
from .circuit import Batch, Circuit, Labeller, eval_forward, eval_gradient, layerize  # noqa: E402
from .frontend import compile_answers, parse_program, prove, to_deeplog  # noqa: E402

__all__ = [
    "__version__",
    "get_structure",
    "get_transformation",
    "Atom",
    "Formula",
    "Model",
    "Variable",
    "parse_formula",
    "parse_model",
    "print_formula",
    "print_model",
    "brute_force_wmc",
    "evaluate",
    "compile_formula",
    "compile_roots",
    "simplify",
    "Batch",
    "Circuit",
    "Labeller",
    "eval_forward",
    "eval_gradient",
    "layerize",
    "compile_answers",
    "parse_program",
    "prove",
    "to_deeplog",
]
