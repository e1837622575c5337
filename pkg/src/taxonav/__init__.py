"""Taxonomy-guided service discovery.

Builds a multi-parent category tree over a registry of natural-language
service descriptions using an LLM, then answers queries by walking the tree
one node at a time so no prompt ever enumerates the whole registry.
"""

__version__ = "0.1.0"
