"""Online contextualized few-shot learning on toy sequence streams.

Submodules: ``sequences`` (stream generation), ``memory`` (prototype store),
``context`` (encoder and recurrent controller), ``learners``, ``training``,
``evaluation``, ``config``/``experiment`` (run orchestration) and ``cli``.
The differentiable core lives in ``ocfsl.autodiff``.
"""

__version__ = "0.1.0"
