"""Tests for kforge."""
