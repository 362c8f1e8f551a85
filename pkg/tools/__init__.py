"""MCP tools package.""" 