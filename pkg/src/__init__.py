# swarmforge - agent, commander, simulator, parsers, store and analysis
