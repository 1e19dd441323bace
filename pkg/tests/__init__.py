"""Tests for ncchart."""
