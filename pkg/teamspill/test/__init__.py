"""
Tests (run with `python3 -m pytest -rxPXs | tee results.txt`)


  Monte Carlo tests with many replicates are marked `slow`; skip them with
`-m "not slow"`.
"""
