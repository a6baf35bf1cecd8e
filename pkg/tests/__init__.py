"""Tests for the wsod-labels package."""
