"""
promptseg test suite.

Run with ``pytest`` (slow acceptance checks need ``-m slow``) or through the
interactive ``promptsegtest`` menu.
"""
