"""Tests for GPT Therapy system."""
