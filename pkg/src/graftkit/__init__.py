"""graftkit: a desk-scale vision-language grafting pipeline.

Contrastive image/text alignment, a query-transformer adapter trained with
contrastive/generative/matching objectives, soft-prompt bridging into a
frozen decoder LM, the downstream tasks built on them, and the statistics
used to evaluate everything; all on a procedurally generated image/report
corpus with a deterministic float64 autograd core.
"""

__version__ = "0.1.0"
