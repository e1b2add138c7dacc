"""Context-aware machine translation at desk scale.

Submodules:

* ``vectorizer`` — text → fixed-width embedding backends
* ``contexts``   — the ContextSet carrier type
* ``store``      — deduplicated binary embedding store + text index
* ``corpus``     — subtitle-style corpus ingestion, documents, splits
* ``encoder``    — attention primitives and the context encoder
* ``model``      — translation model variants, checkpoints, decoding
* ``trainer``    — optimization loop, context dropout, fine-tuning
* ``evalbench``  — BLEU, synthetic attribute-control benchmark, ablations
* ``cli``        — the ``ctxmt`` command
"""

__version__ = "0.1.0"
