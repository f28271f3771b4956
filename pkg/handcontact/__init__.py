"""Training-free dense hand contact estimation with multimodal LLMs."""
