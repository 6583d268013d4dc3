"""
flatdiv - Main Entry Point
"""

from flatdiv.main import app

if __name__ == "__main__":
    app()
