"""Utility modules shared by the mvssl package."""
