"""Shipped lens descriptions; coefficient values are placeholders."""
