// Serves the seed-7 toy micro-encoder (32-bit) over stdin/stdout.
#include "paattack/bridge_server.hpp"
#include "paattack/micro_encoder.hpp"
#include "test_support.hpp"

int main() {
  const paattack::MicroEncoder<float> encoder(paattack::testing::toy_config());
  auto io = paattack::wire::stdio_stream();
  paattack::wire::serve_stream(encoder, *io);
  return 0;
}
