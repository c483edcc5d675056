"""Shipped run configurations (configs/) and prompt banks (prompts/)."""
